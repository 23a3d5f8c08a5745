//! Loading meshes, grids and abstractions from disk.

use std::path::Path;

use lightsq::grid::{voxelize_mesh, VoxelizeOptions};
use lightsq::{Abstraction, Normalization, TriMesh, TsdfGrid};

use crate::CliError;

/// A reference shape on the lattice.
#[derive(Clone, Debug)]
pub struct Reference {
    pub grid: TsdfGrid,
    /// World-to-lattice frame for meshes. Grid files are already in the frame of
    /// whatever produced them, so they carry none.
    pub normalization: Option<Normalization>,
}

pub fn is_mesh_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "obj" | "stl"))
}

pub fn load_mesh(path: &Path) -> Result<TriMesh, CliError> {
    TriMesh::load(path).map_err(|source| CliError::Mesh {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a `.obj`/`.stl` mesh (voxelized on the spot) or a grid file.
pub fn load_reference(path: &Path, opts: &VoxelizeOptions) -> Result<Reference, CliError> {
    let grid_err = |source| CliError::Grid {
        path: path.display().to_string(),
        source,
    };
    if is_mesh_path(path) {
        let mesh = load_mesh(path)?;
        let v = voxelize_mesh(&mesh, opts).map_err(grid_err)?;
        Ok(Reference {
            grid: v.grid,
            normalization: Some(v.normalization),
        })
    } else {
        Ok(Reference {
            grid: TsdfGrid::load(path).map_err(grid_err)?,
            normalization: None,
        })
    }
}

pub fn load_abstraction(path: &Path) -> Result<Abstraction, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Abstraction::from_json(&text).map_err(|source| CliError::Abstraction {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Re-expresses `abstraction` in the reference frame when the two disagree.
/// Returns whether anything changed.
pub fn align(abstraction: &mut Abstraction, reference: &Reference) -> bool {
    let Some(target) = reference.normalization else {
        return false;
    };
    if abstraction.normalization.approx_eq(&target, 1e-9) {
        return false;
    }
    let from = abstraction.normalization;
    for p in &mut abstraction.primitives {
        p.sq = from.reframe(&p.sq, &target);
    }
    abstraction.normalization = target;
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use lightsq::abstraction::GridMeta;
    use lightsq::{LabeledSuperquadric, Stage, Superquadric};
    use nalgebra::Vector3;

    #[test]
    fn mesh_extensions() {
        assert!(is_mesh_path(Path::new("a/b.OBJ")));
        assert!(is_mesh_path(Path::new("b.stl")));
        assert!(!is_mesh_path(Path::new("b.tsdf")));
        assert!(!is_mesh_path(Path::new("b")));
    }

    #[test]
    fn align_maps_primitives_between_frames() {
        let from = Normalization {
            scale: 2.0,
            translate: [0.2, 0.0, 0.0],
        };
        let to = Normalization {
            scale: 1.0,
            translate: [0.0, 0.5, 0.0],
        };
        let mut a = Abstraction::empty(from, GridMeta { resolution: 8, tau: 0.25 });
        a.primitives.push(LabeledSuperquadric {
            id: 0,
            stage: Stage::Main,
            parent: None,
            sq: Superquadric::sphere(Vector3::new(1.2, 0.0, 0.0), 0.4),
        });
        let reference = Reference {
            grid: TsdfGrid::from_sdf(8, 1.0, |_| 1.0),
            normalization: Some(to),
        };
        assert!(align(&mut a, &reference));
        let sq = &a.primitives[0].sq;
        // World center (1.2 - 0.2) / 2 = 0.5.
        assert!((sq.translation - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-12);
        assert!((sq.scale.x - 0.2).abs() < 1e-12);
        assert!(!align(&mut a, &reference));
    }
}
