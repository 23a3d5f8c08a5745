//! Triangle meshes: OBJ / binary STL I/O, a bounding-volume hierarchy for exact
//! point-to-triangle distance, and zero-isosurface extraction from voxel fields.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed mesh file: {0}")]
    Malformed(String),
    #[error("unsupported mesh format: {0}")]
    UnsupportedFormat(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

/// Indexed-triangle JSON form used by the HTTP service.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexedMeshJson {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl From<&TriMesh> for IndexedMeshJson {
    fn from(m: &TriMesh) -> Self {
        Self {
            vertices: m.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            triangles: m.triangles.clone(),
        }
    }
}

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            triangles,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// Number of undirected edges not shared by exactly two triangles.
    pub fn open_edge_count(&self) -> usize {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }

    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.open_edge_count() == 0
    }

    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.dot(&b.cross(&c))
            })
            .sum::<f64>()
            / 6.0
    }

    /// Merges vertices with bit-identical coordinates (STL stores a triangle soup).
    pub fn welded(&self) -> TriMesh {
        let mut map: HashMap<[u64; 3], u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut remap = Vec::with_capacity(self.vertices.len());
        for v in &self.vertices {
            let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
            let id = *map.entry(key).or_insert_with(|| {
                vertices.push(*v);
                (vertices.len() - 1) as u32
            });
            remap.push(id);
        }
        let triangles = self
            .triangles
            .iter()
            .map(|t| t.map(|i| remap[i as usize]))
            .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
            .collect();
        TriMesh::new(vertices, triangles)
    }

    /// Applies `p -> scale * p + translate` to every vertex.
    pub fn transformed(&self, scale: f64, translate: &Vector3<f64>) -> TriMesh {
        TriMesh::new(
            self.vertices.iter().map(|v| v * scale + translate).collect(),
            self.triangles.clone(),
        )
    }

    pub fn append(&mut self, other: &TriMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
    }

    pub fn load(path: &Path) -> Result<TriMesh, MeshError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "obj" => Self::read_obj(BufReader::new(std::fs::File::open(path)?)),
            "stl" => Self::read_stl(BufReader::new(std::fs::File::open(path)?)),
            other => Err(MeshError::UnsupportedFormat(other.to_string())),
        }
    }

    pub fn read_obj<R: BufRead>(reader: R) -> Result<TriMesh, MeshError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let coords: Vec<f64> = tokens
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| MeshError::Malformed(format!("line {}: {e}", lineno + 1)))?;
                    if coords.len() != 3 {
                        return Err(MeshError::Malformed(format!(
                            "line {}: vertex needs 3 coordinates",
                            lineno + 1
                        )));
                    }
                    vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let mut face = Vec::new();
                    for tok in tokens {
                        let idx_str = tok.split('/').next().unwrap_or("");
                        let idx: i64 = idx_str.parse().map_err(|_| {
                            MeshError::Malformed(format!("line {}: bad index {tok}", lineno + 1))
                        })?;
                        let resolved = if idx < 0 {
                            vertices.len() as i64 + idx
                        } else {
                            idx - 1
                        };
                        if resolved < 0 || resolved >= vertices.len() as i64 {
                            return Err(MeshError::Malformed(format!(
                                "line {}: index {idx} out of range",
                                lineno + 1
                            )));
                        }
                        face.push(resolved as u32);
                    }
                    if face.len() < 3 {
                        return Err(MeshError::Malformed(format!(
                            "line {}: face with fewer than 3 vertices",
                            lineno + 1
                        )));
                    }
                    for k in 1..face.len() - 1 {
                        triangles.push([face[0], face[k], face[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(TriMesh::new(vertices, triangles))
    }

    pub fn read_stl<R: Read>(mut reader: R) -> Result<TriMesh, MeshError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() < 84 {
            return Err(MeshError::Malformed("binary STL shorter than header".into()));
        }
        let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        if bytes.len() < 84 + count * 50 {
            return Err(MeshError::Malformed(format!(
                "binary STL declares {count} triangles but holds {} bytes",
                bytes.len()
            )));
        }
        let mut vertices = Vec::with_capacity(count * 3);
        let mut triangles = Vec::with_capacity(count);
        for t in 0..count {
            let rec = &bytes[84 + t * 50..84 + (t + 1) * 50];
            for k in 0..3 {
                let off = 12 + k * 12;
                let f = |o: usize| f32::from_le_bytes(rec[off + o..off + o + 4].try_into().unwrap()) as f64;
                vertices.push(Vector3::new(f(0), f(4), f(8)));
            }
            let b = (t * 3) as u32;
            triangles.push([b, b + 1, b + 2]);
        }
        Ok(TriMesh::new(vertices, triangles).welded())
    }

    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn write_stl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&[0u8; 80])?;
        w.write_all(&(self.triangles.len() as u32).to_le_bytes())?;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(t);
            let n = (b - a).cross(&(c - a)).try_normalize(0.0).unwrap_or_default();
            for v in [n, a, b, c] {
                for k in 0..3 {
                    w.write_all(&(v[k] as f32).to_le_bytes())?;
                }
            }
            w.write_all(&[0u8; 2])?;
        }
        Ok(())
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[derive(Clone, Debug)]
struct BvhNode {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    // Leaf: triangles[start..start+count]; inner: children at `left` and `left + 1`.
    start: u32,
    count: u32,
    left: u32,
}

/// Median-split AABB tree over the triangles of a mesh.
pub struct Bvh<'a> {
    mesh: &'a TriMesh,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

const LEAF_SIZE: usize = 4;

impl<'a> Bvh<'a> {
    pub fn build(mesh: &'a TriMesh) -> Self {
        let n = mesh.triangles.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let boxes: Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> = (0..n)
            .map(|t| {
                let [a, b, c] = mesh.triangle(t);
                let lo = a.inf(&b).inf(&c);
                let hi = a.sup(&b).sup(&c);
                (lo, hi, (lo + hi) * 0.5)
            })
            .collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        nodes.push(BvhNode {
            lo: Vector3::zeros(),
            hi: Vector3::zeros(),
            start: 0,
            count: n as u32,
            left: 0,
        });
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let (start, count) = (nodes[ni].start as usize, nodes[ni].count as usize);
            let slice = &mut order[start..start + count];
            let mut lo = Vector3::repeat(f64::INFINITY);
            let mut hi = Vector3::repeat(f64::NEG_INFINITY);
            let mut clo = lo;
            let mut chi = hi;
            for &t in slice.iter() {
                let (l, h, c) = &boxes[t as usize];
                lo = lo.inf(l);
                hi = hi.sup(h);
                clo = clo.inf(c);
                chi = chi.sup(c);
            }
            nodes[ni].lo = lo;
            nodes[ni].hi = hi;
            if count <= LEAF_SIZE {
                continue;
            }
            let axis = (chi - clo).imax();
            let mid = count / 2;
            slice.select_nth_unstable_by(mid, |&x, &y| {
                boxes[x as usize].2[axis].total_cmp(&boxes[y as usize].2[axis])
            });
            let left = nodes.len();
            nodes.push(BvhNode {
                lo,
                hi,
                start: start as u32,
                count: mid as u32,
                left: 0,
            });
            nodes.push(BvhNode {
                lo,
                hi,
                start: (start + mid) as u32,
                count: (count - mid) as u32,
                left: 0,
            });
            nodes[ni].left = left as u32;
            nodes[ni].count = 0;
            stack.push(left);
            stack.push(left + 1);
        }
        Self { mesh, nodes, order }
    }

    /// Unsigned distance from `p` to the mesh, or `None` when no triangle lies
    /// within `max_dist`.
    pub fn nearest_distance(&self, p: &Vector3<f64>, max_dist: f64) -> Option<f64> {
        if self.mesh.triangles.is_empty() {
            return None;
        }
        let mut best = max_dist * max_dist;
        let mut found = false;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if box_dist2(p, &node.lo, &node.hi) > best {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = self.mesh.triangle(t as usize);
                    let d2 = (closest_point_on_triangle(p, &a, &b, &c) - p).norm_squared();
                    if d2 <= best {
                        best = d2;
                        found = true;
                    }
                }
            } else {
                let l = node.left as usize;
                let (dl, dr) = (
                    box_dist2(p, &self.nodes[l].lo, &self.nodes[l].hi),
                    box_dist2(p, &self.nodes[l + 1].lo, &self.nodes[l + 1].hi),
                );
                // Visit the nearer child first.
                if dl < dr {
                    stack.push(l + 1);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(l + 1);
                }
            }
        }
        found.then(|| best.sqrt())
    }
}

#[inline]
fn box_dist2(p: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> f64 {
    let mut d = 0.0;
    for i in 0..3 {
        let v = if p[i] < lo[i] {
            lo[i] - p[i]
        } else if p[i] > hi[i] {
            p[i] - hi[i]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

/// Zero-isosurface of a scalar field sampled at voxel centers, by surface nets.
///
/// `field[x + n*(y + n*z)]` is negative inside. One vertex is placed per cell with a
/// sign change (mean of its edge crossings) and one quad per sign-changing lattice
/// edge, oriented so normals point to the positive side.
pub fn extract_isosurface(
    field: &[f32],
    resolution: usize,
    origin: &Vector3<f64>,
    voxel_size: f64,
) -> TriMesh {
    let n = resolution;
    if n < 2 {
        return TriMesh::default();
    }
    let idx = |x: usize, y: usize, z: usize| x + n * (y + n * z);
    let cells = n - 1;
    let cidx = |x: usize, y: usize, z: usize| x + cells * (y + cells * z);
    let mut cell_vertex = vec![u32::MAX; cells * cells * cells];
    let mut vertices = Vec::new();
    const CORNERS: [[usize; 3]; 8] = [
        [0, 0, 0],
        [1, 0, 0],
        [0, 1, 0],
        [1, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [0, 1, 1],
        [1, 1, 1],
    ];
    const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (2, 3),
        (4, 5),
        (6, 7),
        (0, 2),
        (1, 3),
        (4, 6),
        (5, 7),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];
    for z in 0..cells {
        for y in 0..cells {
            for x in 0..cells {
                let vals: [f64; 8] =
                    CORNERS.map(|c| field[idx(x + c[0], y + c[1], z + c[2])] as f64);
                let inside = vals.iter().filter(|v| **v < 0.0).count();
                if inside == 0 || inside == 8 {
                    continue;
                }
                let mut acc = Vector3::zeros();
                let mut k = 0.0;
                for (a, b) in EDGES {
                    if (vals[a] < 0.0) != (vals[b] < 0.0) {
                        let t = vals[a] / (vals[a] - vals[b]);
                        let pa = Vector3::from(CORNERS[a].map(|c| c as f64));
                        let pb = Vector3::from(CORNERS[b].map(|c| c as f64));
                        acc += pa + (pb - pa) * t;
                        k += 1.0;
                    }
                }
                let local = acc / k + Vector3::new(x as f64, y as f64, z as f64);
                cell_vertex[cidx(x, y, z)] = vertices.len() as u32;
                vertices.push(origin + local * voxel_size);
            }
        }
    }
    let mut triangles = Vec::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let v0 = field[idx(x, y, z)] < 0.0;
                for axis in 0..3 {
                    let mut p = [x, y, z];
                    p[axis] += 1;
                    if p[axis] >= n {
                        continue;
                    }
                    let v1 = field[idx(p[0], p[1], p[2])] < 0.0;
                    if v0 == v1 {
                        continue;
                    }
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    let base = [x, y, z];
                    if base[u] == 0 || base[v] == 0 || base[u] > cells || base[v] > cells {
                        continue;
                    }
                    let cell = |du: usize, dv: usize| {
                        let mut c = base;
                        c[u] = c[u] - 1 + du;
                        c[v] = c[v] - 1 + dv;
                        cell_vertex[cidx(c[0], c[1], c[2])]
                    };
                    let q = [cell(0, 0), cell(1, 0), cell(1, 1), cell(0, 1)];
                    if q.contains(&u32::MAX) {
                        continue;
                    }
                    if v0 {
                        triangles.push([q[0], q[1], q[2]]);
                        triangles.push([q[0], q[2], q[3]]);
                    } else {
                        triangles.push([q[0], q[2], q[1]]);
                        triangles.push([q[0], q[3], q[2]]);
                    }
                }
            }
        }
    }
    TriMesh::new(vertices, triangles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superquadric::Superquadric;

    fn cube() -> TriMesh {
        let v = (0..8)
            .map(|i| {
                Vector3::new(
                    (i & 1) as f64 - 0.5,
                    ((i >> 1) & 1) as f64 - 0.5,
                    ((i >> 2) & 1) as f64 - 0.5,
                )
            })
            .collect();
        let t = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        TriMesh::new(v, t)
    }

    #[test]
    fn cube_is_watertight_with_unit_volume() {
        let c = cube();
        assert!(c.is_watertight());
        assert!((c.signed_volume() - 1.0).abs() < 1e-12);
        let mut open = c.clone();
        open.triangles.pop();
        assert_eq!(open.open_edge_count(), 3);
    }

    #[test]
    fn obj_and_stl_round_trip() {
        let c = cube();
        let mut buf = Vec::new();
        c.write_obj(&mut buf).unwrap();
        let back = TriMesh::read_obj(&buf[..]).unwrap();
        assert_eq!(back, c);

        let mut stl = Vec::new();
        c.write_stl(&mut stl).unwrap();
        let from_stl = TriMesh::read_stl(&stl[..]).unwrap();
        assert_eq!(from_stl.vertices.len(), 8);
        assert!(from_stl.is_watertight());
        assert!((from_stl.signed_volume() - 1.0).abs() < 1e-6);

        assert!(TriMesh::read_stl(&stl[..100]).is_err());
        assert!(TriMesh::read_obj("v 0 0 0\nf 1 2 3\n".as_bytes()).is_err());
    }

    #[test]
    fn obj_polygons_and_slash_indices() {
        let src = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\nf -4 -3 -2\n";
        let m = TriMesh::read_obj(src.as_bytes()).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let sq = Superquadric::new(
            [0.4, 1.3],
            Vector3::new(0.5, 0.3, 0.2),
            nalgebra::UnitQuaternion::from_euler_angles(0.3, 0.2, 0.1),
            Vector3::zeros(),
        );
        let mesh = sq.tessellate(10);
        let bvh = Bvh::build(&mesh);
        for i in 0..300 {
            let p = Vector3::new(
                ((i * 37) % 101) as f64 / 50.0 - 1.0,
                ((i * 53) % 97) as f64 / 48.5 - 1.0,
                ((i * 71) % 89) as f64 / 44.5 - 1.0,
            );
            let brute = (0..mesh.triangles.len())
                .map(|t| {
                    let [a, b, c] = mesh.triangle(t);
                    (closest_point_on_triangle(&p, &a, &b, &c) - p).norm()
                })
                .fold(f64::MAX, f64::min);
            let fast = bvh.nearest_distance(&p, f64::INFINITY).unwrap();
            assert!((brute - fast).abs() < 1e-12);
            match bvh.nearest_distance(&p, 0.1) {
                Some(d) => assert!((d - brute).abs() < 1e-12),
                None => assert!(brute > 0.1),
            }
        }
    }

    #[test]
    fn tessellation_is_outward() {
        let sq = Superquadric::sphere(Vector3::zeros(), 0.5);
        assert!(sq.tessellate(8).signed_volume() > 0.0);
    }

    #[test]
    fn isosurface_of_sphere_is_closed() {
        let n = 24;
        let h = 2.0 / n as f64;
        let origin = Vector3::repeat(-1.0 + h / 2.0);
        let mut field = vec![0f32; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = origin + Vector3::new(x as f64, y as f64, z as f64) * h;
                    field[x + n * (y + n * z)] = (p.norm() - 0.6) as f32;
                }
            }
        }
        let mesh = extract_isosurface(&field, n, &origin, h);
        assert!(mesh.is_watertight());
        let vol = mesh.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.216;
        assert!((vol - exact).abs() / exact < 0.05, "{vol} vs {exact}");
        for v in &mesh.vertices {
            assert!((v.norm() - 0.6).abs() < h);
        }
    }
}
