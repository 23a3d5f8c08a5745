//! Subcommand implementations. Results go to `out`, warnings to stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use lightsq::grid::{voxelize_mesh, VoxelizeOptions};
use lightsq::metrics::{evaluate_abstraction, EvalOptions, MetricReport};
use lightsq::pipeline::{self, multiscale_refine, RefineRequest};
use lightsq::{decomp, Abstraction, Normalization, RunConfig, TriMesh};
use nalgebra::Vector3;

use crate::args::{DecomposeArgs, EvalArgs, FitArgs, RefineArgs, ServeArgs, VoxelizeArgs};
use crate::input::{align, load_abstraction, load_mesh, load_reference, write_text, Reference};
use crate::server::{router, AppState};
use crate::session::SessionState;
use crate::{options, CliError};

/// Tessellation density of `--export-obj`.
pub const EXPORT_SUBDIVISIONS: usize = 32;

pub fn voxelize_options(config: &RunConfig) -> VoxelizeOptions {
    VoxelizeOptions {
        resolution: config.resolution,
        tau_factor: config.tau_factor,
        force_parity: config.force_parity,
        normalize: true,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::io(Path::new("<stdout>"), e)
}

/// Union tessellation mapped back to input units.
pub fn world_mesh(abstraction: &Abstraction, subdivisions: usize) -> TriMesh {
    let n = abstraction.normalization;
    let inv = 1.0 / n.scale;
    abstraction
        .union_mesh(subdivisions)
        .transformed(inv, &(-Vector3::from(n.translate) * inv))
}

pub fn stage_counts(a: &Abstraction) -> String {
    let mut counts = BTreeMap::new();
    for p in &a.primitives {
        *counts.entry(p.stage).or_insert(0usize) += 1;
    }
    counts
        .iter()
        .map(|(s, n)| format!("{s} {n}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn summary(report: &MetricReport) -> String {
    let opt = |v: f64| if v.is_nan() { "n/a".to_string() } else { format!("{v:.6}") };
    format!(
        "primitives {}\nvoxel_iou {}\noverlap_rate {}\nchamfer {}\nemd {}",
        report.n_primitives,
        opt(report.voxel_iou),
        opt(report.overlap_rate),
        opt(report.cd),
        opt(report.emd),
    )
}

pub fn fit(args: &FitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = options::assemble(&RunConfig::default(), args.config.config.as_deref(), &args.config.overrides())?;
    let input = args
        .input
        .clone()
        .or_else(|| config.input.clone())
        .ok_or_else(|| CliError::Usage("no input given on the command line or in the config".into()))?;
    let output: PathBuf = args
        .output
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| input.with_extension("sq.json"));

    let reference = load_reference(&input, &voxelize_options(&config))?;
    let normalization = reference.normalization.unwrap_or_else(Normalization::identity);
    let run = pipeline::run(&reference.grid, &config, normalization);
    for s in &run.block_skips {
        eprintln!("warning: partition {} has {} voxel(s), too few to fit", s.partition, s.voxels);
    }
    let a = &run.abstraction;
    write_text(&output, &a.to_json())?;
    if let Some(path) = &args.export_obj {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        world_mesh(a, EXPORT_SUBDIVISIONS)
            .write_obj(std::io::BufWriter::new(file))
            .map_err(io_err(path))?;
    }
    if a.primitives.is_empty() {
        return Err(CliError::Empty);
    }
    let opts = EvalOptions {
        skip_emd: args.skip_emd,
        seed: config.seed,
        ..EvalOptions::default()
    };
    let report = evaluate_abstraction(&reference.grid, a, &opts);
    writeln!(
        out,
        "wrote {} ({} partitions; {})\n{}",
        output.display(),
        run.partitions,
        stage_counts(a),
        summary(&report)
    )
    .map_err(stdout_err)
}

/// Loads an abstraction and its reference, re-expressing the abstraction in the
/// reference frame when their normalizations differ.
fn load_pair(abstraction: &Path, reference: &Path, opts: &VoxelizeOptions) -> Result<(Abstraction, Reference), CliError> {
    let mut a = load_abstraction(abstraction)?;
    let r = load_reference(reference, opts)?;
    if align(&mut a, &r) {
        eprintln!(
            "warning: {} was normalized differently from {}; primitives re-expressed in the reference frame",
            abstraction.display(),
            reference.display()
        );
    }
    Ok((a, r))
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let header = load_abstraction(&args.abstraction)?;
    let base = header.config.clone().unwrap_or_default();
    let opts = VoxelizeOptions {
        resolution: args.res.unwrap_or(header.grid.resolution),
        tau_factor: base.tau_factor,
        force_parity: args.force_parity,
        normalize: true,
    };
    let (a, reference) = load_pair(&args.abstraction, &args.reference, &opts)?;
    let report = evaluate_abstraction(
        &reference.grid,
        &a,
        &EvalOptions {
            skip_emd: args.skip_emd,
            seed: args.seed,
            ..EvalOptions::default()
        },
    );
    if let Some(path) = &args.csv {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        let fresh = file.metadata().map_err(io_err(path))?.len() == 0;
        if fresh {
            writeln!(file, "{}", MetricReport::CSV_HEADER).map_err(io_err(path))?;
        }
        writeln!(file, "{}", report.csv_row()).map_err(io_err(path))?;
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(out, "{text}").map_err(stdout_err)
}

/// The abstraction's own config under the file and flag overrides.
fn session_config(a: &Abstraction, args: &crate::args::ConfigArgs) -> Result<RunConfig, CliError> {
    let mut base = a.config.clone().unwrap_or_default();
    base.resolution = a.grid.resolution;
    options::assemble(&base, args.config.as_deref(), &args.overrides())
}

pub fn refine(args: &RefineArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let header = load_abstraction(&args.abstraction)?;
    let config = session_config(&header, &args.config)?;
    let (a, reference) = load_pair(&args.abstraction, &args.reference, &voxelize_options(&config))?;
    let request = RefineRequest::new(args.id, args.splits, &config);
    let refined = multiscale_refine(&a, &reference.grid, &request, &config)?;
    match &args.output {
        Some(path) => write_text(path, &refined.to_json()),
        None => writeln!(out, "{}", refined.to_json()).map_err(stdout_err),
    }
}

/// Loads everything `serve` needs without binding a socket.
pub fn serve_state(args: &ServeArgs) -> Result<AppState, CliError> {
    let header = load_abstraction(&args.abstraction)?;
    let config = session_config(&header, &args.config)?;
    let (a, reference) = load_pair(&args.abstraction, &args.reference, &voxelize_options(&config))?;
    let eval = EvalOptions {
        skip_emd: args.skip_emd,
        seed: config.seed,
        ..EvalOptions::default()
    };
    Ok(AppState::new(SessionState::new(reference.grid, a, config), eval))
}

pub fn serve(args: &ServeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let state = serve_state(args)?;
    let addr = format!("{}:{}", args.host, args.port);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(stdout_err)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Io { path: addr.clone(), source: e })?;
        let local = listener.local_addr().map_err(|e| CliError::Io { path: addr.clone(), source: e })?;
        writeln!(out, "listening on http://{local}").map_err(stdout_err)?;
        out.flush().map_err(stdout_err)?;
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::Io { path: addr.clone(), source: e })
    })
}

pub fn voxelize(args: &VoxelizeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = options::assemble(&RunConfig::default(), args.config.config.as_deref(), &args.config.overrides())?;
    let mesh = load_mesh(&args.mesh)?;
    let v = voxelize_mesh(&mesh, &voxelize_options(&config)).map_err(|source| CliError::Grid {
        path: args.mesh.display().to_string(),
        source,
    })?;
    v.grid.save(&args.output).map_err(|source| CliError::Grid {
        path: args.output.display().to_string(),
        source,
    })?;
    writeln!(
        out,
        "wrote {} ({}^3, {} interior voxels)\nnormalization {}",
        args.output.display(),
        v.grid.resolution,
        v.grid.interior_count(),
        serde_json::to_string(&v.normalization).expect("normalization serializes")
    )
    .map_err(stdout_err)
}

pub fn decompose(args: &DecomposeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = options::assemble(&RunConfig::default(), args.config.config.as_deref(), &args.config.overrides())?;
    let reference = load_reference(&args.input, &voxelize_options(&config))?;
    let grid = &reference.grid;
    let partitions = decomp::decompose(grid, &config.decomp);
    let labels = decomp::partition_labels(&partitions, grid.len());
    grid.save_labels(&labels, &args.output).map_err(|source| CliError::Grid {
        path: args.output.display().to_string(),
        source,
    })?;
    writeln!(out, "wrote {} ({} partitions)", args.output.display(), partitions.len()).map_err(stdout_err)
}
