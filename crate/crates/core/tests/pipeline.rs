use lightsq::abstraction::Abstraction;
use lightsq::grid::{voxelize_mesh, VoxelizeOptions};
use lightsq::metrics::voxel_iou;
use lightsq::pipeline::{multiscale_refine, replay_history, run, RefineRequest};
use lightsq::{shapes, Normalization, RunConfig, Stage, Superquadric, TsdfGrid};
use nalgebra::{UnitQuaternion, Vector3};

fn run_config(resolution: usize) -> RunConfig {
    RunConfig {
        resolution,
        ..RunConfig::default()
    }
}

#[test]
fn mesh_to_abstraction_round_trips_through_json() {
    let sq = Superquadric::new(
        [0.6, 0.9],
        Vector3::new(0.5, 0.3, 0.25),
        UnitQuaternion::from_euler_angles(0.2, 0.1, -0.3),
        Vector3::new(0.1, -0.2, 0.05),
    );
    let mesh = sq.tessellate(48);
    let opts = VoxelizeOptions {
        resolution: 48,
        ..VoxelizeOptions::default()
    };
    let vox = voxelize_mesh(&mesh, &opts).expect("closed mesh");
    let config = run_config(48);
    let out = run(&vox.grid, &config, vox.normalization);
    let a = &out.abstraction;
    assert!(!a.primitives.is_empty());
    assert!(a.validate().is_ok());
    assert!(voxel_iou(&vox.grid, &a.superquadrics()) > 0.85);
    assert_eq!(a.normalization, vox.normalization);
    assert_eq!(Abstraction::from_json(&a.to_json()).unwrap(), *a);
}

#[test]
fn runs_are_deterministic() {
    let grid = TsdfGrid::from_sdf(40, 1.0, shapes::l_shape(0.6, 0.2, 0.25));
    let config = run_config(40);
    let a = run(&grid, &config, Normalization::identity()).abstraction;
    let b = run(&grid, &config, Normalization::identity()).abstraction;
    assert_eq!(a, b);
}

#[test]
fn refinement_replaces_only_the_target() {
    let grid = TsdfGrid::from_sdf(48, 1.0, shapes::dumbbell(0.45, 0.35, 0.12));
    let config = run_config(48);
    let base = run(&grid, &config, Normalization::identity()).abstraction;
    assert!(base.primitives.len() >= 2);
    let target = base.primitives[0].id;
    let refined = multiscale_refine(&base, &grid, &RefineRequest::new(target, 2, &config), &config).unwrap();

    assert!(refined.get(target).is_none());
    let children: Vec<_> = refined.primitives.iter().filter(|p| p.parent == Some(target)).collect();
    assert!(!children.is_empty());
    assert!(children.iter().all(|c| c.id >= base.next_id() && c.stage != Stage::Block));
    let kept: Vec<_> = refined.primitives.iter().filter(|p| p.parent != Some(target)).collect();
    let expected: Vec<_> = base.primitives.iter().filter(|p| p.id != target).collect();
    assert_eq!(kept, expected);
    assert!(refined.validate().is_ok());
    assert_eq!(refined.normalization, base.normalization);
}

#[test]
fn replay_reproduces_the_run_state() {
    let grid = TsdfGrid::from_sdf(40, 1.0, shapes::dumbbell(0.45, 0.35, 0.12));
    let out = run(&grid, &run_config(40), Normalization::identity());
    let replayed = replay_history(&grid, &out.abstraction);
    assert_eq!(replayed.grid.values, out.state.grid.values);
    assert_eq!(replayed.history.last_updater, out.state.history.last_updater);
    assert_eq!(replayed.skipped, out.state.grid.interior_mask());
}
