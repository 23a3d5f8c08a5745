//! Block, regrow and fill, with residual pruning and local multiscale refinement.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::abstraction::{Abstraction, GridMeta, LabeledSuperquadric, Normalization, Stage};
use crate::config::{FitConfig, PruneConfig, RunConfig};
use crate::decomp::{self, Axis, Partition, SlicePlane};
use crate::fitter;
use crate::grid::{edt_squared, signed_distance_from_mask, CarveStats, TsdfGrid, UpdateHistory, VoxelComponent};
use crate::superquadric::Superquadric;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PipelineError {
    #[error("no primitive with id {0}")]
    UnknownPrimitive(u32),
    #[error("the region owned by primitive {0} has no interior voxels")]
    DegenerateRegion(u32),
    #[error("splits per axis must be at least 1")]
    InvalidSplits,
}

/// Residual component categories used for pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Main,
    Connector,
    Offcut,
}

impl Category {
    pub fn stage(self) -> Stage {
        match self {
            Category::Main => Stage::Main,
            Category::Connector => Stage::Connector,
            Category::Offcut => Stage::Offcut,
        }
    }

    /// Smallest init-sphere radius that is still fitted.
    pub fn threshold(self, prune: &PruneConfig) -> f64 {
        match self {
            Category::Main => prune.t_m,
            Category::Connector => prune.t_c,
            Category::Offcut => prune.t_o,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub category: Category,
    /// Init sphere: the deepest voxel of the component in the current field.
    pub center: Vector3<f64>,
    pub radius: f64,
    /// Ball of the input shape that the fractions were measured in.
    pub ball_center: Vector3<f64>,
    pub ball_radius: f64,
    pub untouched_fraction: f64,
    /// Distinct main-stage primitives that flipped voxels inside the ball.
    pub main_updaters: Vec<u32>,
}

/// Mutable state threaded through regrow, fill and refinement.
#[derive(Clone, Debug)]
pub struct WorkingState {
    /// The carved field.
    pub grid: TsdfGrid,
    pub history: UpdateHistory,
    /// Pruned voxels, excluded from component extraction but never carved.
    pub skipped: Vec<bool>,
    /// Signed depth of the input before any carving.
    pub depth: Vec<f32>,
    pub next_id: u32,
}

impl WorkingState {
    pub fn new(grid: &TsdfGrid) -> Self {
        Self {
            depth: depth_field(grid),
            history: UpdateHistory::for_grid(grid),
            skipped: vec![false; grid.len()],
            grid: grid.clone(),
            next_id: 0,
        }
    }

    pub fn carve(&mut self, p: &LabeledSuperquadric) -> CarveStats {
        self.history.stage_of.insert(p.id, p.stage);
        self.next_id = self.next_id.max(p.id + 1);
        self.grid.carve(&p.sq, &mut self.history, p.id)
    }

    fn skip(&mut self, component: &VoxelComponent) {
        for &i in &component.voxel_indices {
            self.skipped[i as usize] = true;
        }
    }
}

/// Unclamped signed depth when the grid carries it, else a distance transform of
/// its interior.
pub fn depth_field(grid: &TsdfGrid) -> Vec<f32> {
    match &grid.raw_sdf {
        Some(raw) => raw.clone(),
        None => signed_distance_from_mask(&grid.interior_mask(), grid.resolution, grid.voxel_size),
    }
}

/// A partition the block stage could not initialize from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSkip {
    pub partition: u32,
    pub voxels: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockOutput {
    pub primitives: Vec<LabeledSuperquadric>,
    pub skipped: Vec<BlockSkip>,
}

/// Fits up to `k` primitives to each partition on its own, ignoring the rest of
/// the shape. Ids follow partition order.
pub fn block(grid: &TsdfGrid, partitions: &[Partition], k: usize, config: &RunConfig) -> BlockOutput {
    let fitted: Vec<Option<Vec<Superquadric>>> = partitions
        .par_iter()
        .map(|p| {
            if p.len() <= 1 {
                return None;
            }
            let field = standalone_field(grid, &p.voxels);
            let mut state = WorkingState::new(&field);
            let prims = fill_loop(&mut state, &config.fit, &config.prune, Some(k));
            Some(prims.into_iter().map(|l| l.sq).collect())
        })
        .collect();
    let mut out = BlockOutput::default();
    for (p, f) in partitions.iter().zip(fitted) {
        match f {
            None => out.skipped.push(BlockSkip {
                partition: p.id,
                voxels: p.len(),
            }),
            Some(sqs) => {
                for sq in sqs {
                    out.primitives.push(LabeledSuperquadric {
                        id: out.primitives.len() as u32,
                        stage: Stage::Block,
                        parent: None,
                        sq,
                    });
                }
            }
        }
    }
    out
}

/// Cropped occupancy field of `voxels` (grid indices) on the same lattice
/// spacing, padded so the truncation band fits.
pub fn standalone_field(grid: &TsdfGrid, voxels: &[u32]) -> TsdfGrid {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &v in voxels {
        let c = grid.coords(v as usize);
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let pad = (grid.tau / grid.voxel_size).ceil() as usize + 2;
    let extent = (0..3).map(|k| hi[k] - lo[k] + 1).max().unwrap_or(1);
    let m = extent + 2 * pad;
    let mut mask = vec![false; m * m * m];
    for &v in voxels {
        let c = grid.coords(v as usize);
        let (x, y, z) = (c[0] - lo[0] + pad, c[1] - lo[1] + pad, c[2] - lo[2] + pad);
        mask[x + m * (y + m * z)] = true;
    }
    let origin = grid.origin + Vector3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) * grid.voxel_size
        - Vector3::repeat(pad as f64 * grid.voxel_size);
    TsdfGrid::from_mask(m, origin, grid.voxel_size, grid.tau, &mask)
}

/// Re-fits every block primitive against the whole shape, with the other
/// primitives carved out of the target. Earlier entries are already regrown when
/// later ones are visited. A failed fit keeps its initialization.
pub fn regrow(grid: &TsdfGrid, blocks: &[LabeledSuperquadric], config: &FitConfig) -> Vec<LabeledSuperquadric> {
    let mut current: Vec<Superquadric> = blocks.iter().map(|b| b.sq.clone()).collect();
    let mut scratch = UpdateHistory::for_grid(grid);
    for i in 0..current.len() {
        let mut target = grid.clone();
        for (j, sq) in current.iter().enumerate() {
            if j != i {
                target.carve(sq, &mut scratch, j as u32);
            }
        }
        if let Ok(res) = fitter::fit_one(&target, &current[i], config) {
            current[i] = res.sq;
        }
    }
    blocks
        .iter()
        .zip(current)
        .map(|(b, sq)| LabeledSuperquadric {
            id: b.id,
            stage: Stage::Regrow,
            parent: b.parent,
            sq,
        })
        .collect()
}

/// Classifies a residual component by the carve history of the input shape
/// around it.
///
/// The ball is the largest ball inscribed in the input shape that contains the
/// component's deepest voxel, so it reaches into whatever was carved next to the
/// residue.
pub fn classify_component(component: &VoxelComponent, state: &WorkingState, prune: &PruneConfig) -> Classification {
    let grid = &state.grid;
    let (center, radius) = inscribed_sphere(grid, component);
    let interior: Vec<usize> = (0..grid.len()).filter(|&i| state.depth[i] < 0.0).collect();
    let (ball_center, ball_radius) = interior
        .par_iter()
        .filter_map(|&i| {
            let r = -(state.depth[i] as f64);
            ((grid.center(i) - center).norm() <= r).then_some((r, i))
        })
        .reduce_with(|a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
        .map(|(r, i)| (grid.center(i), r))
        .unwrap_or((center, radius));

    let mut total = 0usize;
    let mut untouched = 0usize;
    let mut updaters = std::collections::BTreeSet::new();
    let reach = Vector3::repeat(ball_radius);
    if let Some((lo, hi)) = grid.index_box(&(ball_center - reach), &(ball_center + reach)) {
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let i = grid.index(x, y, z);
                    if state.depth[i] >= 0.0 || (grid.center_of(x, y, z) - ball_center).norm() > ball_radius {
                        continue;
                    }
                    total += 1;
                    match state.history.last_updater[i] {
                        None => untouched += 1,
                        Some(id) => {
                            if state.history.stage(id).is_some_and(Stage::counts_as_main) {
                                updaters.insert(id);
                            }
                        }
                    }
                }
            }
        }
    }
    let untouched_fraction = if total == 0 { 1.0 } else { untouched as f64 / total as f64 };
    let updated_fraction = 1.0 - untouched_fraction;
    let category = if untouched_fraction > prune.p_m {
        Category::Main
    } else if updaters.len() >= 2 && updated_fraction > prune.p_c {
        Category::Connector
    } else {
        // One updater above P_O is an offcut, and so is everything unresolved.
        Category::Offcut
    };
    Classification {
        category,
        center,
        radius,
        ball_center,
        ball_radius,
        untouched_fraction,
        main_updaters: updaters.into_iter().collect(),
    }
}

/// Deepest voxel of `component` measured against the component alone. Among
/// equally deep voxels the one nearest the component's centroid wins.
fn inscribed_sphere(grid: &TsdfGrid, component: &VoxelComponent) -> (Vector3<f64>, f64) {
    let local = standalone_field(grid, &component.voxel_indices);
    let depth = local.raw_sdf.as_deref().unwrap_or(&local.values);
    let centroid = component
        .voxel_indices
        .iter()
        .fold(Vector3::zeros(), |acc, &v| acc + grid.center(v as usize))
        / component.len().max(1) as f64;
    let mut best = (f32::INFINITY, f64::INFINITY, usize::MAX);
    for &v in &component.voxel_indices {
        let p = grid.center(v as usize);
        let q = local.to_lattice(&p);
        let d = depth[local.index(q.x.round() as usize, q.y.round() as usize, q.z.round() as usize)];
        let off = (p - centroid).norm_squared();
        if (d, off, v as usize) < best {
            best = (d, off, v as usize);
        }
    }
    (grid.center(best.2), (best.0 as f64).abs())
}

/// Fills residual components largest first until none is left unskipped.
pub fn fill(state: &mut WorkingState, fit: &FitConfig, prune: &PruneConfig) -> Vec<LabeledSuperquadric> {
    fill_loop(state, fit, prune, None)
}

fn fill_loop(state: &mut WorkingState, fit: &FitConfig, prune: &PruneConfig, limit: Option<usize>) -> Vec<LabeledSuperquadric> {
    let mut out = Vec::new();
    while limit.is_none_or(|k| out.len() < k) {
        let Some(component) = state.grid.components_excluding(Some(&state.skipped)).into_iter().next() else {
            break;
        };
        let class = classify_component(&component, state, prune);
        if class.radius < class.category.threshold(prune) {
            state.skip(&component);
            continue;
        }
        let fitted = fitter::fit_from_sphere(
            &state.grid,
            &component.voxel_indices,
            class.center,
            class.radius,
            fit,
            Some(&state.skipped),
        );
        let Ok(res) = fitted else {
            state.skip(&component);
            continue;
        };
        if covered_voxels(&state.grid, &res.sq, &component) == 0 {
            state.skip(&component);
            continue;
        }
        let p = LabeledSuperquadric {
            id: state.next_id,
            stage: class.category.stage(),
            parent: None,
            sq: res.sq,
        };
        state.carve(&p);
        out.push(p);
    }
    out
}

/// Component voxels a carve by `sq` would flip.
fn covered_voxels(grid: &TsdfGrid, sq: &Superquadric, component: &VoxelComponent) -> usize {
    let prepared = crate::superquadric::Prepared::new(sq);
    component
        .voxel_indices
        .iter()
        .filter(|&&i| prepared.srdf(&grid.center(i as usize)) < 0.0)
        .count()
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub abstraction: Abstraction,
    pub partitions: usize,
    pub block_skips: Vec<BlockSkip>,
    pub state: WorkingState,
}

/// Decompose, block, regrow and fill.
pub fn run(grid: &TsdfGrid, config: &RunConfig, normalization: Normalization) -> RunOutput {
    let partitions = decomp::decompose(grid, &config.decomp);
    let mut out = run_on_partitions(grid, &partitions, config);
    out.abstraction.normalization = normalization;
    out.abstraction.config = Some(config.clone());
    out
}

fn run_on_partitions(grid: &TsdfGrid, partitions: &[Partition], config: &RunConfig) -> RunOutput {
    let blocks = block(grid, partitions, config.block_k, config);
    let regrown = regrow(grid, &blocks.primitives, &config.fit);
    let mut state = WorkingState::new(grid);
    for p in &regrown {
        state.carve(p);
    }
    let filled = fill(&mut state, &config.fit, &config.prune);
    let mut abstraction = Abstraction::empty(
        Normalization::identity(),
        GridMeta {
            resolution: grid.resolution,
            tau: grid.tau,
        },
    );
    abstraction.primitives = regrown.into_iter().chain(filled).collect();
    RunOutput {
        abstraction,
        partitions: partitions.len(),
        block_skips: blocks.skipped,
        state,
    }
}

/// Carves `grid` by every primitive of `abstraction` in order. Whatever stays
/// interior afterwards is treated as pruned residue.
pub fn replay_history(grid: &TsdfGrid, abstraction: &Abstraction) -> WorkingState {
    let mut state = WorkingState::new(grid);
    for p in &abstraction.primitives {
        state.carve(p);
    }
    state.skipped = state.grid.interior_mask();
    state
}

/// Parameters of one refinement request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineRequest {
    pub target: u32,
    pub splits: usize,
    /// Added to each scale of the target; `None` means two voxels.
    pub dilation: Option<f64>,
    pub local_resolution: usize,
}

impl RefineRequest {
    pub fn new(target: u32, splits: usize, config: &RunConfig) -> Self {
        Self {
            target,
            splits,
            dilation: config.multiscale.dilation,
            local_resolution: config.multiscale.local_resolution,
        }
    }
}

/// Replaces one primitive by a finer local abstraction of the region it owns.
///
/// `grid` is the uncarved input in the abstraction's frame. The region is the
/// target's box grown by the dilation, resampled in the target's frame at the
/// local resolution and cut to the voxels the target carved plus pruned residue
/// within the dilation. Other primitives are copied unchanged.
pub fn multiscale_refine(
    abstraction: &Abstraction,
    grid: &TsdfGrid,
    request: &RefineRequest,
    config: &RunConfig,
) -> Result<Abstraction, PipelineError> {
    if request.splits == 0 {
        return Err(PipelineError::InvalidSplits);
    }
    let target = abstraction
        .get(request.target)
        .ok_or(PipelineError::UnknownPrimitive(request.target))?
        .clone();
    let dilation = request.dilation.unwrap_or(2.0 * grid.voxel_size);
    let state = replay_history(grid, abstraction);

    let owned: Vec<bool> = state.history.last_updater.iter().map(|u| *u == Some(target.id)).collect();
    let near_owned = edt_squared(&owned, grid.resolution);
    let reach = (dilation / grid.voxel_size).powi(2);
    let region: Vec<bool> = (0..grid.len())
        .map(|i| owned[i] || (state.skipped[i] && near_owned[i] <= reach))
        .collect();
    if !region.iter().any(|&r| r) {
        return Err(PipelineError::DegenerateRegion(target.id));
    }
    let region_sdf = signed_distance_from_mask(&region, grid.resolution, grid.voxel_size);
    let input = grid.raw_sdf.as_deref().unwrap_or(&grid.values);

    let half = target.sq.scale + Vector3::repeat(dilation);
    let side = 2.0 * half.max();
    let m = request.local_resolution;
    let h = side / m as f64;
    let tau = grid.tau / grid.voxel_size * h;
    let origin = Vector3::repeat(-0.5 * side + 0.5 * h);
    let rot = target.sq.rotation;
    let trans = target.sq.translation;
    let mut local = TsdfGrid::from_sdf_on(m, origin, h, tau, |p| {
        let boxed = (p.abs() - half).max();
        let w = rot.transform_vector(p) + trans;
        let phi = grid.sample(input, &w).unwrap_or(grid.tau);
        let psi = grid.sample(&region_sdf, &w).unwrap_or(grid.tau);
        phi.max(psi).max(boxed)
    });
    // Depth for classification comes from the interior mask instead.
    local.raw_sdf = None;
    if local.interior_count() == 0 {
        return Err(PipelineError::DegenerateRegion(target.id));
    }

    let partitions = decomp::split(&local, &even_planes(m, request.splits));
    let sub = run_on_partitions(&local, &partitions, config);
    if sub.abstraction.primitives.is_empty() {
        return Err(PipelineError::DegenerateRegion(target.id));
    }

    let mut next = abstraction.next_id();
    let children: Vec<LabeledSuperquadric> = sub
        .abstraction
        .primitives
        .into_iter()
        .map(|c| {
            let child = LabeledSuperquadric {
                id: next,
                stage: c.stage,
                parent: Some(target.id),
                sq: c.sq.transformed(&rot, &trans),
            };
            next += 1;
            child
        })
        .collect();
    let mut out = abstraction.clone();
    let pos = out.primitives.iter().position(|p| p.id == target.id).expect("target present");
    out.primitives.splice(pos..=pos, children);
    Ok(out)
}

/// Planes cutting an `m`-slice lattice into `splits` even slabs per axis.
fn even_planes(m: usize, splits: usize) -> Vec<SlicePlane> {
    let mut planes = Vec::new();
    for axis in Axis::ALL {
        for k in 1..splits {
            let index = (k * m / splits).saturating_sub(1);
            planes.push(SlicePlane { axis, index, score: 0.0 });
        }
    }
    planes
}
