//! Truncated signed distance grids.
//!
//! A [`TsdfGrid`] samples a signed distance (negative inside) at the centers of a
//! cubic lattice and clamps it to `[-tau, tau]`. Fitting consumes the clamped
//! values; an optional unclamped companion (`raw_sdf`) keeps interior depth for
//! inscribed-sphere queries. [`TsdfGrid::carve`] removes a primitive's interior from
//! the field and records which primitive flipped each voxel in an [`UpdateHistory`].

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::abstraction::{Normalization, Stage};
use crate::mesh::{Bvh, TriMesh};
use crate::superquadric::Superquadric;

const MAGIC: &[u8; 4] = b"LSQG";
const VERSION_VALUES: u32 = 1;
const VERSION_LABELS: u32 = 2;
const HEADER_LEN: usize = 4 + 4 + 4 + 12 + 4 + 4;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed grid file: {0}")]
    MalformedFile(String),
    #[error("grid header declares resolution {resolution} ({expected} voxels) but the payload holds {found}")]
    ResolutionMismatch {
        resolution: usize,
        expected: usize,
        found: usize,
    },
    #[error("mesh is not watertight ({open_edges} open edges)")]
    NonWatertightMesh { open_edges: usize },
    #[error("mesh has no triangles")]
    EmptyMesh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsdfGrid {
    pub resolution: usize,
    /// World position of the center of voxel (0, 0, 0).
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub tau: f64,
    /// `resolution^3` clamped values, x fastest.
    pub values: Vec<f32>,
    pub raw_sdf: Option<Vec<f32>>,
}

/// Per-voxel record of the primitive whose carving flipped the voxel to outside.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateHistory {
    pub last_updater: Vec<Option<u32>>,
    pub stage_of: BTreeMap<u32, Stage>,
}

impl UpdateHistory {
    pub fn new(len: usize) -> Self {
        Self {
            last_updater: vec![None; len],
            stage_of: BTreeMap::new(),
        }
    }

    pub fn for_grid(grid: &TsdfGrid) -> Self {
        Self::new(grid.len())
    }

    pub fn stage(&self, id: u32) -> Option<Stage> {
        self.stage_of.get(&id).copied()
    }

    /// Voxels whose flip is attributed to `id`.
    pub fn owned_by(&self, id: u32) -> Vec<usize> {
        self.last_updater
            .iter()
            .enumerate()
            .filter_map(|(i, u)| (*u == Some(id)).then_some(i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelComponent {
    pub id: usize,
    pub voxel_indices: Vec<u32>,
}

impl VoxelComponent {
    pub fn len(&self) -> usize {
        self.voxel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CarveStats {
    /// Voxels that went from inside to outside.
    pub flipped: usize,
    /// Voxels whose value changed at all.
    pub changed: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct VoxelizeOptions {
    pub resolution: usize,
    pub tau_factor: f64,
    /// Sign open meshes by ray parity instead of rejecting them.
    pub force_parity: bool,
    /// Center the mesh and scale its longest half-extent to [`NORMALIZED_HALF_EXTENT`].
    pub normalize: bool,
}

impl Default for VoxelizeOptions {
    fn default() -> Self {
        Self {
            resolution: 100,
            tau_factor: 1.0,
            force_parity: false,
            normalize: true,
        }
    }
}

/// Normalized shapes keep a margin inside `[-1, 1]^3` so the truncation band and
/// the zero isosurface stay inside the lattice.
pub const NORMALIZED_HALF_EXTENT: f64 = 0.9;

/// Clamps to `[-tau, tau]` and rounds to `f32` without leaving the interval.
#[inline]
pub fn clamp_to_f32(v: f64, tau: f64) -> f32 {
    let t32 = f32_at_most(tau);
    (v.clamp(-tau, tau) as f32).clamp(-t32, t32)
}

#[inline]
fn f32_at_most(x: f64) -> f32 {
    let r = x as f32;
    if r as f64 > x {
        f32::from_bits(r.to_bits() - 1)
    } else {
        r
    }
}

impl TsdfGrid {
    pub fn filled(resolution: usize, origin: Vector3<f64>, voxel_size: f64, tau: f64, value: f64) -> Self {
        Self {
            resolution,
            origin,
            voxel_size,
            tau,
            values: vec![clamp_to_f32(value, tau); resolution.pow(3)],
            raw_sdf: None,
        }
    }

    /// Lattice covering `[-1, 1]^3` with `resolution` voxels per axis.
    pub fn unit_lattice(resolution: usize) -> (Vector3<f64>, f64) {
        let h = 2.0 / resolution as f64;
        (Vector3::repeat(-1.0 + 0.5 * h), h)
    }

    /// Samples a signed distance function on the unit lattice.
    pub fn from_sdf<F>(resolution: usize, tau_factor: f64, sdf: F) -> Self
    where
        F: Fn(&Vector3<f64>) -> f64 + Sync,
    {
        let (origin, h) = Self::unit_lattice(resolution);
        Self::from_sdf_on(resolution, origin, h, tau_factor * h, sdf)
    }

    pub fn from_sdf_on<F>(resolution: usize, origin: Vector3<f64>, voxel_size: f64, tau: f64, sdf: F) -> Self
    where
        F: Fn(&Vector3<f64>) -> f64 + Sync,
    {
        let n = resolution;
        let raw: Vec<f32> = (0..n * n * n)
            .into_par_iter()
            .map(|i| {
                let x = i % n;
                let y = (i / n) % n;
                let z = i / (n * n);
                let p = origin + Vector3::new(x as f64, y as f64, z as f64) * voxel_size;
                sdf(&p) as f32
            })
            .collect();
        let values = raw.iter().map(|&v| clamp_to_f32(v as f64, tau)).collect();
        Self {
            resolution,
            origin,
            voxel_size,
            tau,
            values,
            raw_sdf: Some(raw),
        }
    }

    /// Occupancy-only field: `mask` voxels inside, everything else outside, with
    /// distances from a Euclidean distance transform.
    pub fn from_mask(resolution: usize, origin: Vector3<f64>, voxel_size: f64, tau: f64, mask: &[bool]) -> Self {
        let raw = signed_distance_from_mask(mask, resolution, voxel_size);
        let values = raw.iter().map(|&v| clamp_to_f32(v as f64, tau)).collect();
        Self {
            resolution,
            origin,
            voxel_size,
            tau,
            values,
            raw_sdf: Some(raw),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let n = self.resolution;
        [i % n, (i / n) % n, i / (n * n)]
    }

    #[inline]
    pub fn center(&self, i: usize) -> Vector3<f64> {
        let [x, y, z] = self.coords(i);
        self.center_of(x, y, z)
    }

    #[inline]
    pub fn center_of(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin + Vector3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    /// Continuous lattice coordinates of a world point (voxel centers are integers).
    #[inline]
    pub fn to_lattice(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.origin) / self.voxel_size
    }

    #[inline]
    pub fn is_inside(&self, i: usize) -> bool {
        self.values[i] < 0.0
    }

    pub fn interior_count(&self) -> usize {
        self.values.iter().filter(|v| **v < 0.0).count()
    }

    pub fn interior_mask(&self) -> Vec<bool> {
        self.values.iter().map(|v| *v < 0.0).collect()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.powi(3)
    }

    /// Inclusive voxel index range along each axis covering the world box, or
    /// `None` when the box misses the lattice.
    pub fn index_box(&self, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<([usize; 3], [usize; 3])> {
        let n = self.resolution as f64;
        let lo = self.to_lattice(min);
        let hi = self.to_lattice(max);
        let mut a = [0usize; 3];
        let mut b = [0usize; 3];
        for k in 0..3 {
            let l = lo[k].ceil().max(0.0);
            let h = hi[k].floor().min(n - 1.0);
            if !(l <= h) {
                return None;
            }
            a[k] = l as usize;
            b[k] = h as usize;
        }
        Some((a, b))
    }

    /// Checks the clamp invariant.
    pub fn is_clamped(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.is_finite() && (*v as f64) >= -self.tau && (*v as f64) <= self.tau)
    }

    /// Trilinear interpolation of `field` (same layout as `values`); `None` outside
    /// the lattice hull.
    pub fn sample(&self, field: &[f32], p: &Vector3<f64>) -> Option<f64> {
        let n = self.resolution;
        let q = self.to_lattice(p);
        let max = (n - 1) as f64;
        if (0..3).any(|k| !(q[k] >= 0.0 && q[k] <= max)) {
            return None;
        }
        let base: [usize; 3] = std::array::from_fn(|k| (q[k].floor() as usize).min(n.saturating_sub(2)));
        let f: [f64; 3] = std::array::from_fn(|k| q[k] - base[k] as f64);
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                        * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                        * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                    if w == 0.0 {
                        continue;
                    }
                    let idx = self.index(
                        (base[0] + dx).min(n - 1),
                        (base[1] + dy).min(n - 1),
                        (base[2] + dz).min(n - 1),
                    );
                    acc += w * field[idx] as f64;
                }
            }
        }
        Some(acc)
    }

    /// Removes `sq`'s interior from the field.
    ///
    /// For every voxel with `phi < 0`: inside the primitive the value becomes
    /// `-srdf`, otherwise `max(-srdf, phi)`; voxels with `phi >= 0` are left alone.
    /// Voxels that end up `>= 0` are attributed to `id` in `history`. Only voxels
    /// within `tau` of the primitive's box can change, so the sweep is limited to
    /// that box. The unclamped companion no longer describes the field afterwards
    /// and is dropped.
    pub fn carve(&mut self, sq: &Superquadric, history: &mut UpdateHistory, id: u32) -> CarveStats {
        self.raw_sdf = None;
        let mut stats = CarveStats::default();
        let bb = sq.world_aabb(self.tau);
        let Some((lo, hi)) = self.index_box(&bb.min, &bb.max) else {
            return stats;
        };
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let i = self.index(x, y, z);
                    let phi = self.values[i];
                    if phi >= 0.0 {
                        continue;
                    }
                    let s = sq.srdf(&self.center_of(x, y, z));
                    let updated = if s < 0.0 { -s } else { (-s).max(phi as f64) };
                    let v = clamp_to_f32(updated, self.tau);
                    if v != phi {
                        stats.changed += 1;
                        self.values[i] = v;
                    }
                    if v >= 0.0 {
                        stats.flipped += 1;
                        history.last_updater[i] = Some(id);
                    }
                }
            }
        }
        stats
    }

    /// 6-connected components of the interior, largest first.
    pub fn connected_components(&self) -> Vec<VoxelComponent> {
        self.components_excluding(None)
    }

    /// Like [`connected_components`](Self::connected_components) but ignoring
    /// voxels flagged in `skip`.
    pub fn components_excluding(&self, skip: Option<&[bool]>) -> Vec<VoxelComponent> {
        let mask: Vec<bool> = match skip {
            Some(s) => self.values.iter().zip(s).map(|(v, s)| *v < 0.0 && !*s).collect(),
            None => self.interior_mask(),
        };
        label_components(&mask, self.resolution)
    }

    /// Deepest voxel of `component` and its depth.
    ///
    /// Depth comes from `raw_sdf` when present; otherwise from a distance transform
    /// of the current interior.
    pub fn max_inscribed_sphere(&self, component: &VoxelComponent) -> (Vector3<f64>, f64) {
        match &self.raw_sdf {
            Some(raw) => self.max_inscribed_sphere_in(component, raw),
            None => {
                let depth = signed_distance_from_mask(&self.interior_mask(), self.resolution, self.voxel_size);
                self.max_inscribed_sphere_in(component, &depth)
            }
        }
    }

    /// Deepest voxel of `component` under an explicit signed depth field.
    pub fn max_inscribed_sphere_in(&self, component: &VoxelComponent, depth: &[f32]) -> (Vector3<f64>, f64) {
        let mut best = (f32::INFINITY, usize::MAX);
        for &i in &component.voxel_indices {
            let d = depth[i as usize];
            if d < best.0 || (d == best.0 && (i as usize) < best.1) {
                best = (d, i as usize);
            }
        }
        (self.center(best.1), (best.0 as f64).abs())
    }

    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), GridError> {
        write_header(w, VERSION_VALUES, self)?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TsdfGrid, GridError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TsdfGrid, GridError> {
        let (version, mut grid) = parse_header(bytes)?;
        if version != VERSION_VALUES {
            return Err(GridError::MalformedFile(format!(
                "expected a value grid (version {VERSION_VALUES}), found version {version}"
            )));
        }
        let payload = &bytes[HEADER_LEN..];
        let expected = grid.resolution.pow(3);
        if !payload.len().is_multiple_of(4) {
            return Err(GridError::MalformedFile("payload is not a whole number of f32 values".into()));
        }
        if payload.len() / 4 != expected {
            return Err(GridError::ResolutionMismatch {
                resolution: grid.resolution,
                expected,
                found: payload.len() / 4,
            });
        }
        grid.values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if grid.values.iter().any(|v| !v.is_finite()) {
            return Err(GridError::MalformedFile("non-finite value".into()));
        }
        Ok(grid)
    }

    /// Writes a label volume (`0` exterior, otherwise a label) with this grid's header.
    pub fn save_labels(&self, labels: &[u16], path: &Path) -> Result<(), GridError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, VERSION_LABELS, self)?;
        let mut buf = Vec::with_capacity(labels.len() * 2);
        for v in labels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_labels(path: &Path) -> Result<(TsdfGrid, Vec<u16>), GridError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (version, grid) = parse_header(&bytes)?;
        if version != VERSION_LABELS {
            return Err(GridError::MalformedFile(format!("expected a label grid, found version {version}")));
        }
        let payload = &bytes[HEADER_LEN..];
        let expected = grid.resolution.pow(3);
        if payload.len() != expected * 2 {
            return Err(GridError::ResolutionMismatch {
                resolution: grid.resolution,
                expected,
                found: payload.len() / 2,
            });
        }
        let labels = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((grid, labels))
    }
}

fn write_header<W: Write>(w: &mut W, version: u32, g: &TsdfGrid) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(g.resolution as u32).to_le_bytes())?;
    for k in 0..3 {
        w.write_all(&(g.origin[k] as f32).to_le_bytes())?;
    }
    w.write_all(&(g.voxel_size as f32).to_le_bytes())?;
    w.write_all(&(g.tau as f32).to_le_bytes())
}

fn parse_header(bytes: &[u8]) -> Result<(u32, TsdfGrid), GridError> {
    if bytes.len() < HEADER_LEN {
        return Err(GridError::MalformedFile(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(GridError::MalformedFile("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let version = u32_at(4);
    if version != VERSION_VALUES && version != VERSION_LABELS {
        return Err(GridError::MalformedFile(format!("unsupported version {version}")));
    }
    let resolution = u32_at(8) as usize;
    if resolution == 0 || resolution > 2048 {
        return Err(GridError::MalformedFile(format!("implausible resolution {resolution}")));
    }
    let origin = Vector3::new(f32_at(12), f32_at(16), f32_at(20));
    let voxel_size = f32_at(24);
    let tau = f32_at(28);
    if !(voxel_size > 0.0 && tau > 0.0) || origin.iter().any(|o| !o.is_finite()) {
        return Err(GridError::MalformedFile("non-positive voxel size or truncation".into()));
    }
    Ok((
        version,
        TsdfGrid {
            resolution,
            origin,
            voxel_size,
            tau,
            values: Vec::new(),
            raw_sdf: None,
        },
    ))
}

/// 6-connected components of `mask` on an `n^3` lattice, sorted by size
/// (descending) and then by smallest member index.
pub fn label_components(mask: &[bool], n: usize) -> Vec<VoxelComponent> {
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    let nn = n * n;
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i as u32);
            let x = i % n;
            let y = (i / n) % n;
            let z = i / nn;
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < n {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - n);
            }
            if y + 1 < n {
                visit(i + n);
            }
            if z > 0 {
                visit(i - nn);
            }
            if z + 1 < n {
                visit(i + nn);
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
        .into_iter()
        .enumerate()
        .map(|(id, voxel_indices)| VoxelComponent { id, voxel_indices })
        .collect()
}

/// Squared Euclidean distance (in voxels) from every voxel to the nearest voxel
/// with `feature[i] == true`; `f64::INFINITY` when there is none.
pub fn edt_squared(feature: &[bool], n: usize) -> Vec<f64> {
    let mut d: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let strides = [1, n, n * n];
    for (axis, &stride) in strides.iter().enumerate() {
        for a in 0..n {
            for b in 0..n {
                let base = match axis {
                    0 => n * (a + n * b),
                    1 => a + n * n * b,
                    _ => a + n * b,
                };
                for k in 0..n {
                    line[k] = d[base + k * stride];
                }
                edt_1d(&line, &mut out, &mut v, &mut z);
                for k in 0..n {
                    d[base + k * stride] = out[k];
                }
            }
        }
    }
    d
}

// Lower envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for q in 0..n {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Signed distance estimate (world units, negative inside) of the region `mask`.
///
/// Each voxel is a cube; the boundary is taken halfway between a voxel center and
/// the nearest center of opposite occupancy. Space beyond the lattice is outside.
pub fn signed_distance_from_mask(mask: &[bool], n: usize, h: f64) -> Vec<f32> {
    let outside: Vec<bool> = mask.iter().map(|m| !m).collect();
    let to_out = edt_squared(&outside, n);
    let to_in = edt_squared(mask, n);
    let far = (3 * n) as f64;
    (0..mask.len())
        .map(|i| {
            if mask[i] {
                let x = i % n;
                let y = (i / n) % n;
                let z = i / (n * n);
                let border = [x + 1, n - x, y + 1, n - y, z + 1, n - z].into_iter().min().unwrap() as f64;
                let d = to_out[i].sqrt().min(border);
                (-(d - 0.5) * h) as f32
            } else {
                let d = if to_in[i].is_finite() { to_in[i].sqrt() } else { far };
                ((d - 0.5) * h) as f32
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Voxelized {
    pub grid: TsdfGrid,
    pub normalization: Normalization,
}

/// Scale and offset that center `mesh` and fit it inside `[-h, h]^3` with
/// `h = NORMALIZED_HALF_EXTENT`.
pub fn normalization_for(mesh: &TriMesh) -> Normalization {
    let Some((lo, hi)) = mesh.bounds() else {
        return Normalization::identity();
    };
    let center = (lo + hi) * 0.5;
    let half = ((hi - lo) * 0.5).max();
    let scale = if half > 0.0 { NORMALIZED_HALF_EXTENT / half } else { 1.0 };
    Normalization {
        scale,
        translate: (-center * scale).map(|t| t + 0.0).into(),
    }
}

/// Signed distance voxelization of a closed triangle mesh on the unit lattice.
///
/// Distances are exact point-triangle distances inside the truncation band and a
/// distance-transform estimate (never below `tau`) beyond it. The sign is the
/// parity of crossings of a `+x` ray from each voxel center.
pub fn voxelize_mesh(mesh: &TriMesh, opts: &VoxelizeOptions) -> Result<Voxelized, GridError> {
    if mesh.triangles.is_empty() {
        return Err(GridError::EmptyMesh);
    }
    let open_edges = mesh.open_edge_count();
    if open_edges > 0 && !opts.force_parity {
        return Err(GridError::NonWatertightMesh { open_edges });
    }
    let normalization = if opts.normalize {
        normalization_for(mesh)
    } else {
        Normalization::identity()
    };
    let mesh = mesh.transformed(normalization.scale, &Vector3::from(normalization.translate));
    let n = opts.resolution;
    let (origin, h) = TsdfGrid::unit_lattice(n);
    let tau = opts.tau_factor * h;

    let inside = parity_sign(&mesh, n, &origin, h);

    let bvh = Bvh::build(&mesh);
    let band: Vec<Option<f64>> = (0..n * n * n)
        .into_par_iter()
        .map(|i| {
            let p = origin + Vector3::new((i % n) as f64, ((i / n) % n) as f64, (i / (n * n)) as f64) * h;
            bvh.nearest_distance(&p, tau)
        })
        .collect();
    let estimate = signed_distance_from_mask(&inside, n, h);
    let raw: Vec<f32> = (0..n * n * n)
        .map(|i| {
            let sign = if inside[i] { -1.0 } else { 1.0 };
            let mag = match band[i] {
                Some(d) => d,
                None => (estimate[i].abs() as f64).max(tau * (1.0 + 1e-6)),
            };
            (sign * mag) as f32
        })
        .collect();
    let values = raw.iter().map(|&v| clamp_to_f32(v as f64, tau)).collect();
    Ok(Voxelized {
        grid: TsdfGrid {
            resolution: n,
            origin,
            voxel_size: h,
            tau,
            values,
            raw_sdf: Some(raw),
        },
        normalization,
    })
}

/// Inside flags by `+x` ray parity, one ray per lattice row.
pub fn parity_sign(mesh: &TriMesh, n: usize, origin: &Vector3<f64>, h: f64) -> Vec<bool> {
    // Bin triangles by the lattice rows (y, z) their projection can touch.
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); n * n];
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(t);
        let lo = a.inf(&b).inf(&c);
        let hi = a.sup(&b).sup(&c);
        let range = |k: usize| {
            let l = ((lo[k] - origin[k]) / h).ceil().max(0.0);
            let u = ((hi[k] - origin[k]) / h).floor().min(n as f64 - 1.0);
            (l <= u).then_some((l as usize, u as usize))
        };
        if let (Some((y0, y1)), Some((z0, z1))) = (range(1), range(2)) {
            for z in z0..=z1 {
                for y in y0..=y1 {
                    bins[y + n * z].push(t as u32);
                }
            }
        }
    }
    let rows: Vec<Vec<bool>> = (0..n * n)
        .into_par_iter()
        .map(|row| {
            let y = row % n;
            let z = row / n;
            let py = origin.y + y as f64 * h;
            let pz = origin.z + z as f64 * h;
            let mut hits: Vec<f64> = bins[row]
                .iter()
                .filter_map(|&t| ray_x_crossing(&mesh.triangle(t as usize), py, pz))
                .collect();
            hits.sort_by(f64::total_cmp);
            let mut out = vec![false; n];
            let mut j = 0;
            for (x, o) in out.iter_mut().enumerate() {
                let px = origin.x + x as f64 * h;
                while j < hits.len() && hits[j] <= px {
                    j += 1;
                }
                *o = (hits.len() - j) % 2 == 1;
            }
            out
        })
        .collect();
    let mut inside = vec![false; n * n * n];
    for (row, flags) in rows.into_iter().enumerate() {
        inside[row * n..row * n + n].copy_from_slice(&flags);
    }
    inside
}

/// `x` where the line `{(x, py, pz)}` crosses the triangle, with ties on edges and
/// vertices broken by symbolically perturbing the ray to `(py + e, pz + e^2)`.
fn ray_x_crossing(tri: &[Vector3<f64>; 3], py: f64, pz: f64) -> Option<f64> {
    let mut signs = [0i8; 3];
    let mut w = [0.0; 3];
    for k in 0..3 {
        let a = &tri[(k + 1) % 3];
        let b = &tri[(k + 2) % 3];
        let (s, val) = perturbed_orient(a, b, py, pz);
        signs[k] = s;
        w[k] = val;
    }
    if signs.contains(&0) || !(signs[0] == signs[1] && signs[1] == signs[2]) {
        return None;
    }
    let total = w[0] + w[1] + w[2];
    if total == 0.0 {
        // Numerically all on edges; fall back to the centroid depth.
        return Some((tri[0].x + tri[1].x + tri[2].x) / 3.0);
    }
    Some((w[0] * tri[0].x + w[1] * tri[1].x + w[2] * tri[2].x) / total)
}

// Orientation of p relative to the directed edge a->b in the (y, z) projection.
// The edge is evaluated in a canonical endpoint order so that the two triangles
// sharing it see exactly opposite values.
fn perturbed_orient(a: &Vector3<f64>, b: &Vector3<f64>, py: f64, pz: f64) -> (i8, f64) {
    let swap = (b.y, b.z) < (a.y, a.z);
    let (p, q) = if swap { (b, a) } else { (a, b) };
    let dy = q.y - p.y;
    let dz = q.z - p.z;
    let mut val = dy * (pz - p.z) - dz * (py - p.y);
    let mut sign = if val > 0.0 {
        1
    } else if val < 0.0 {
        -1
    } else if dz != 0.0 {
        if -dz > 0.0 { 1 } else { -1 }
    } else if dy != 0.0 {
        if dy > 0.0 { 1 } else { -1 }
    } else {
        0
    };
    if swap {
        sign = -sign;
        val = -val;
    }
    (sign, val)
}
