//! Exact 3D convex hulls of integer points (quickhull with integer predicates),
//! used for partition hull volumes over voxel corners.

use std::collections::HashMap;

pub type IPoint = [i64; 3];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvexHull {
    /// Hull vertices (a subset of the input points).
    pub vertices: Vec<IPoint>,
    /// Outward-oriented triangles indexing `vertices`.
    pub faces: Vec<[usize; 3]>,
    volume6: i128,
}

impl ConvexHull {
    /// Enclosed volume in cubed input units.
    pub fn volume(&self) -> f64 {
        self.volume6 as f64 / 6.0
    }

    /// Six times the volume, exact.
    pub fn volume6(&self) -> i128 {
        self.volume6
    }
}

#[inline]
fn sub(a: &IPoint, b: &IPoint) -> [i128; 3] {
    [
        (a[0] - b[0]) as i128,
        (a[1] - b[1]) as i128,
        (a[2] - b[2]) as i128,
    ]
}

#[inline]
fn cross(u: &[i128; 3], v: &[i128; 3]) -> [i128; 3] {
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

#[inline]
fn dot(u: &[i128; 3], v: &[i128; 3]) -> i128 {
    u[0] * v[0] + u[1] * v[1] + u[2] * v[2]
}

/// Positive when `p` is on the side of plane `abc` that `(b - a) x (c - a)` points to.
#[inline]
pub fn orient(a: &IPoint, b: &IPoint, c: &IPoint, p: &IPoint) -> i128 {
    dot(&cross(&sub(b, a), &sub(c, a)), &sub(p, a))
}

struct Face {
    v: [usize; 3],
    outside: Vec<usize>,
    alive: bool,
}

/// Convex hull of `points`, or `None` when they are coplanar.
pub fn convex_hull(points: &[IPoint]) -> Option<ConvexHull> {
    let mut pts: Vec<IPoint> = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 4 {
        return None;
    }

    // Initial tetrahedron from extreme points.
    let p0 = 0;
    let p1 = (0..pts.len()).max_by_key(|&i| {
        let d = sub(&pts[i], &pts[p0]);
        dot(&d, &d)
    })?;
    let e = sub(&pts[p1], &pts[p0]);
    let p2 = (0..pts.len()).max_by_key(|&i| {
        let c = cross(&e, &sub(&pts[i], &pts[p0]));
        dot(&c, &c)
    })?;
    let c = cross(&e, &sub(&pts[p2], &pts[p0]));
    if dot(&c, &c) == 0 {
        return None;
    }
    let p3 = (0..pts.len()).max_by_key(|&i| orient(&pts[p0], &pts[p1], &pts[p2], &pts[i]).abs())?;
    let o = orient(&pts[p0], &pts[p1], &pts[p2], &pts[p3]);
    if o == 0 {
        return None;
    }
    let tetra = if o < 0 {
        [[p0, p1, p2], [p0, p3, p1], [p1, p3, p2], [p2, p3, p0]]
    } else {
        [[p0, p2, p1], [p0, p1, p3], [p1, p2, p3], [p2, p0, p3]]
    };

    let mut faces: Vec<Face> = Vec::new();
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    let add_face = |faces: &mut Vec<Face>, edges: &mut HashMap<(usize, usize), usize>, v: [usize; 3]| {
        let id = faces.len();
        for k in 0..3 {
            edges.insert((v[k], v[(k + 1) % 3]), id);
        }
        faces.push(Face {
            v,
            outside: Vec::new(),
            alive: true,
        });
        id
    };
    for v in tetra {
        add_face(&mut faces, &mut edges, v);
    }
    let in_tetra = [p0, p1, p2, p3];
    for i in 0..pts.len() {
        if in_tetra.contains(&i) {
            continue;
        }
        for f in faces.iter_mut() {
            if orient(&pts[f.v[0]], &pts[f.v[1]], &pts[f.v[2]], &pts[i]) > 0 {
                f.outside.push(i);
                break;
            }
        }
    }

    let mut cursor = 0;
    while cursor < faces.len() {
        if !faces[cursor].alive || faces[cursor].outside.is_empty() {
            cursor += 1;
            continue;
        }
        let fid = cursor;
        let [a, b, c] = faces[fid].v;
        let eye = *faces[fid]
            .outside
            .iter()
            .max_by_key(|&&i| (orient(&pts[a], &pts[b], &pts[c], &pts[i]), std::cmp::Reverse(i)))
            .unwrap();

        // Faces visible from the eye form a connected patch around `fid`.
        let mut visible = vec![fid];
        let mut is_visible: HashMap<usize, bool> = HashMap::new();
        is_visible.insert(fid, true);
        let mut head = 0;
        let mut horizon: Vec<(usize, usize)> = Vec::new();
        while head < visible.len() {
            let f = visible[head];
            head += 1;
            let v = faces[f].v;
            for k in 0..3 {
                let (u, w) = (v[k], v[(k + 1) % 3]);
                let nb = edges[&(w, u)];
                let vis = *is_visible.entry(nb).or_insert_with(|| {
                    let [x, y, z] = faces[nb].v;
                    orient(&pts[x], &pts[y], &pts[z], &pts[eye]) > 0
                });
                if vis {
                    if !visible.contains(&nb) {
                        visible.push(nb);
                    }
                } else {
                    horizon.push((u, w));
                }
            }
        }

        let mut orphans = Vec::new();
        for &f in &visible {
            faces[f].alive = false;
            orphans.append(&mut faces[f].outside);
            let v = faces[f].v;
            for k in 0..3 {
                let key = (v[k], v[(k + 1) % 3]);
                if edges.get(&key) == Some(&f) {
                    edges.remove(&key);
                }
            }
        }
        let new_faces: Vec<usize> = horizon
            .iter()
            .map(|&(u, w)| add_face(&mut faces, &mut edges, [u, w, eye]))
            .collect();
        for i in orphans {
            if i == eye {
                continue;
            }
            for &nf in &new_faces {
                let [x, y, z] = faces[nf].v;
                if orient(&pts[x], &pts[y], &pts[z], &pts[i]) > 0 {
                    faces[nf].outside.push(i);
                    break;
                }
            }
        }
    }

    let mut remap: HashMap<usize, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut out_faces = Vec::new();
    let reference = pts[p0];
    let mut volume6: i128 = 0;
    for f in faces.iter().filter(|f| f.alive) {
        let tri = f.v.map(|i| {
            *remap.entry(i).or_insert_with(|| {
                vertices.push(pts[i]);
                vertices.len() - 1
            })
        });
        volume6 += orient(&reference, &pts[f.v[0]], &pts[f.v[1]], &pts[f.v[2]]);
        out_faces.push(tri);
    }
    Some(ConvexHull {
        vertices,
        faces: out_faces,
        volume6,
    })
}

/// Corners of the voxels at both ends of every x-row of a voxel set on an `n^3`
/// lattice. Their hull equals the hull of all corners of all voxels in the set.
pub fn voxel_corner_candidates(indices: &[u32], n: usize) -> Vec<IPoint> {
    let mut rows: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for &i in indices {
        let i = i as usize;
        let x = i % n;
        let key = ((i / n) % n, i / (n * n));
        rows.entry(key)
            .and_modify(|r| {
                r.0 = r.0.min(x);
                r.1 = r.1.max(x);
            })
            .or_insert((x, x));
    }
    let mut keys: Vec<_> = rows.keys().copied().collect();
    keys.sort_unstable();
    let mut out = Vec::with_capacity(keys.len() * 8);
    for key in keys {
        let (lo, hi) = rows[&key];
        let (y, z) = (key.0 as i64, key.1 as i64);
        for (dy, dz) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            out.push([lo as i64, y + dy, z + dz]);
            out.push([hi as i64 + 1, y + dy, z + dz]);
        }
    }
    out
}

/// Hull of the union of the cubes of the given voxels, in voxel units.
pub fn voxel_hull(indices: &[u32], n: usize) -> Option<ConvexHull> {
    convex_hull(&voxel_corner_candidates(indices, n))
}

/// Hull of the union of two hulls.
pub fn merged_hull(a: &ConvexHull, b: &ConvexHull) -> Option<ConvexHull> {
    let mut pts = a.vertices.clone();
    pts.extend_from_slice(&b.vertices);
    convex_hull(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn check_is_hull(points: &[IPoint], h: &ConvexHull) {
        // Every face supports the whole point set.
        for f in &h.faces {
            let [a, b, c] = f.map(|i| h.vertices[i]);
            for p in points {
                assert!(orient(&a, &b, &c, p) <= 0, "point {p:?} outside face");
            }
        }
        // Closed 2-manifold with consistent orientation.
        let mut directed = HashSet::new();
        for f in &h.faces {
            for k in 0..3 {
                assert!(directed.insert((f[k], f[(k + 1) % 3])));
            }
        }
        for &(u, w) in &directed {
            assert!(directed.contains(&(w, u)));
        }
        let e = directed.len() / 2;
        assert_eq!(h.vertices.len() as i64 - e as i64 + h.faces.len() as i64, 2);
        for v in &h.vertices {
            assert!(points.contains(v));
        }
    }

    #[test]
    fn unit_cube() {
        let pts: Vec<IPoint> = (0..8).map(|i| [i & 1, (i >> 1) & 1, (i >> 2) & 1]).collect();
        let h = convex_hull(&pts).unwrap();
        assert_eq!(h.volume6(), 6);
        assert_eq!(h.vertices.len(), 8);
        check_is_hull(&pts, &h);
    }

    #[test]
    fn two_separated_cubes_hull_is_a_box() {
        let idx = [0u32, 3];
        let h = voxel_hull(&idx, 8).unwrap();
        assert_eq!(h.volume(), 4.0);
    }

    #[test]
    fn interior_points_do_not_change_tetrahedron() {
        let mut pts = vec![[0, 0, 0], [12, 0, 0], [0, 12, 0], [0, 0, 12]];
        for i in 1..4 {
            for j in 1..4 {
                pts.push([i, j, 1]);
            }
        }
        let h = convex_hull(&pts).unwrap();
        assert_eq!(h.volume6(), 12 * 12 * 12);
        assert_eq!(h.vertices.len(), 4);
        check_is_hull(&pts, &h);
    }

    #[test]
    fn coplanar_is_none() {
        let pts: Vec<IPoint> = (0..10).map(|i| [i, i * i % 7, 0]).collect();
        assert!(convex_hull(&pts).is_none());
        assert!(convex_hull(&[[0, 0, 0], [1, 0, 0], [0, 1, 0]]).is_none());
    }

    #[test]
    fn voxel_hull_of_ball_bounds_its_count() {
        let n = 20;
        let mut idx = Vec::new();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d = [x, y, z].map(|c| c as f64 - 9.5);
                    if d.iter().map(|v| v * v).sum::<f64>() < 64.0 {
                        idx.push((x + n * (y + n * z)) as u32);
                    }
                }
            }
        }
        let h = voxel_hull(&idx, n).unwrap();
        assert!(h.volume() >= idx.len() as f64);
        assert!(h.volume() < idx.len() as f64 * 1.2);
        // Same as the hull of every corner of every voxel.
        let mut all = Vec::new();
        for &i in &idx {
            let i = i as i64;
            let (x, y, z) = (i % n as i64, (i / n as i64) % n as i64, i / (n * n) as i64);
            for c in 0..8 {
                all.push([x + (c & 1), y + ((c >> 1) & 1), z + ((c >> 2) & 1)]);
            }
        }
        assert_eq!(convex_hull(&all).unwrap().volume6(), h.volume6());
    }

    proptest! {
        #[test]
        fn random_point_sets(pts in proptest::collection::vec((0i64..30, 0i64..30, 0i64..30), 4..80)) {
            let pts: Vec<IPoint> = pts.into_iter().map(|(a, b, c)| [a, b, c]).collect();
            if let Some(h) = convex_hull(&pts) {
                check_is_hull(&pts, &h);
                prop_assert!(h.volume6() > 0);
                let m = merged_hull(&h, &h).unwrap();
                prop_assert_eq!(m.volume6(), h.volume6());
            }
        }
    }
}
