//! The serialized output of a run: an ordered list of labeled superquadrics plus
//! the grid metadata and normalization needed to interpret them.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::config::RunConfig;
use crate::mesh::TriMesh;
use crate::superquadric::Superquadric;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Block,
    Regrow,
    Main,
    Connector,
    Offcut,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Block,
        Stage::Regrow,
        Stage::Main,
        Stage::Connector,
        Stage::Offcut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Block => "block",
            Stage::Regrow => "regrow",
            Stage::Main => "main",
            Stage::Connector => "connector",
            Stage::Offcut => "offcut",
        }
    }

    /// Regrown primitives each own a structural partition, so they count as main.
    pub fn counts_as_main(self) -> bool {
        matches!(self, Stage::Regrow | Stage::Main)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown stage {0:?}")]
pub struct UnknownStage(String);

impl FromStr for Stage {
    type Err = UnknownStage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownStage(s.to_string()))
    }
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps input (world) coordinates into the normalized frame:
/// `normalized = scale * world + translate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub translate: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translate: [0.0; 3],
        }
    }

    pub fn is_invertible(&self) -> bool {
        self.scale.is_finite() && self.scale > 0.0 && self.translate.iter().all(|t| t.is_finite())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p * self.scale + Vector3::from(self.translate)
    }

    pub fn invert(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - Vector3::from(self.translate)) / self.scale
    }

    /// Expresses a primitive given in the frame of `self` in the frame of `other`.
    pub fn reframe(&self, sq: &Superquadric, other: &Normalization) -> Superquadric {
        let k = other.scale / self.scale;
        let world_center = self.invert(&sq.translation);
        Superquadric {
            eps: sq.eps,
            scale: sq.scale * k,
            rotation: sq.rotation,
            translation: other.apply(&world_center),
        }
    }

    pub fn approx_eq(&self, other: &Normalization, tol: f64) -> bool {
        (self.scale - other.scale).abs() <= tol * self.scale.abs().max(1.0)
            && self
                .translate
                .iter()
                .zip(other.translate.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub resolution: usize,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSuperquadric {
    pub id: u32,
    pub stage: Stage,
    pub parent: Option<u32>,
    pub sq: Superquadric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Abstraction {
    pub normalization: Normalization,
    pub grid: GridMeta,
    pub primitives: Vec<LabeledSuperquadric>,
    pub config: Option<RunConfig>,
}

#[derive(Debug, Error)]
pub enum AbstractionError {
    #[error("malformed abstraction JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported abstraction version {0}")]
    Version(u32),
    #[error("primitive {id} is invalid: {reason}")]
    InvalidPrimitive { id: u32, reason: String },
    #[error("duplicate primitive id {0}")]
    DuplicateId(u32),
    #[error("normalization is not invertible")]
    BadNormalization,
}

#[derive(Serialize, Deserialize)]
struct PrimitiveJson {
    id: u32,
    stage: Stage,
    parent: Option<u32>,
    eps: [f64; 2],
    scale: [f64; 3],
    rotation_quat: [f64; 4],
    #[serde(default, skip_deserializing)]
    rotation_euler_xyz: [f64; 3],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct AbstractionJson {
    version: u32,
    normalization: Normalization,
    grid: GridMeta,
    primitives: Vec<PrimitiveJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
}

impl Abstraction {
    pub fn empty(normalization: Normalization, grid: GridMeta) -> Self {
        Self {
            normalization,
            grid,
            primitives: Vec::new(),
            config: None,
        }
    }

    pub fn get(&self, id: u32) -> Option<&LabeledSuperquadric> {
        self.primitives.iter().find(|p| p.id == id)
    }

    pub fn next_id(&self) -> u32 {
        self.primitives.iter().map(|p| p.id + 1).max().unwrap_or(0)
    }

    pub fn superquadrics(&self) -> Vec<Superquadric> {
        self.primitives.iter().map(|p| p.sq.clone()).collect()
    }

    /// Union of per-primitive tessellations, in the normalized frame.
    pub fn union_mesh(&self, subdivisions: usize) -> TriMesh {
        let mut out = TriMesh::default();
        for p in &self.primitives {
            out.append(&p.sq.tessellate(subdivisions));
        }
        out
    }

    pub fn validate(&self) -> Result<(), AbstractionError> {
        if !self.normalization.is_invertible() {
            return Err(AbstractionError::BadNormalization);
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.primitives {
            if !seen.insert(p.id) {
                return Err(AbstractionError::DuplicateId(p.id));
            }
            if !p.sq.is_valid() {
                return Err(AbstractionError::InvalidPrimitive {
                    id: p.id,
                    reason: "parameters outside the valid range".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = AbstractionJson {
            version: SCHEMA_VERSION,
            normalization: self.normalization,
            grid: self.grid,
            primitives: self
                .primitives
                .iter()
                .map(|p| {
                    let q = p.sq.rotation.quaternion();
                    PrimitiveJson {
                        id: p.id,
                        stage: p.stage,
                        parent: p.parent,
                        eps: p.sq.eps,
                        scale: p.sq.scale.into(),
                        rotation_quat: [q.w, q.i, q.j, q.k],
                        rotation_euler_xyz: p.sq.euler_xyz(),
                        translation: p.sq.translation.into(),
                    }
                })
                .collect(),
            config: self.config.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("abstraction serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AbstractionError> {
        let doc: AbstractionJson = serde_json::from_str(text)?;
        if doc.version != SCHEMA_VERSION {
            return Err(AbstractionError::Version(doc.version));
        }
        let primitives = doc
            .primitives
            .into_iter()
            .map(|p| {
                let [w, x, y, z] = p.rotation_quat;
                let q = Quaternion::new(w, x, y, z);
                let norm = q.norm();
                if !(norm.is_finite() && norm > 0.0) {
                    return Err(AbstractionError::InvalidPrimitive {
                        id: p.id,
                        reason: "zero or non-finite quaternion".into(),
                    });
                }
                // Keep the stored coefficients untouched when they are already unit
                // so that a serialize/parse round trip is exact.
                let rotation = if (norm - 1.0).abs() < 1e-12 {
                    UnitQuaternion::new_unchecked(q)
                } else {
                    UnitQuaternion::new_normalize(q)
                };
                Ok(LabeledSuperquadric {
                    id: p.id,
                    stage: p.stage,
                    parent: p.parent,
                    sq: Superquadric::new(
                        p.eps,
                        Vector3::from(p.scale),
                        rotation,
                        Vector3::from(p.translation),
                    ),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let out = Self {
            normalization: doc.normalization,
            grid: doc.grid,
            primitives,
            config: doc.config,
        };
        out.validate()?;
        Ok(out)
    }
}
