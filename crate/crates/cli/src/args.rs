use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lightsq", version, about = "Superquadric shape abstraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Abstract a mesh or grid into superquadrics.
    Fit(FitArgs),
    /// Score an abstraction against a reference shape.
    Eval(EvalArgs),
    /// Replace one primitive by a finer local abstraction.
    Refine(RefineArgs),
    /// Serve an abstraction for interactive refinement.
    Serve(ServeArgs),
    /// Voxelize a mesh into a grid file.
    Voxelize(VoxelizeArgs),
    /// Write the structural partition labels of a shape.
    Decompose(DecomposeArgs),
}

/// Configuration sources shared by every subcommand.
#[derive(Debug, Args, Default, Clone)]
pub struct ConfigArgs {
    /// TOML config file with flat dotted keys (`fit.w = 0.1`).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Config override, repeatable (`--set prune.t_m=0.03`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Lattice resolution per axis.
    #[arg(long)]
    pub res: Option<usize>,
    /// Sign open meshes by ray parity instead of failing.
    #[arg(long)]
    pub force_parity: bool,
}

impl ConfigArgs {
    /// `--set` overrides followed by the dedicated flags.
    pub fn overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        if let Some(r) = self.res {
            out.push(format!("resolution={r}"));
        }
        if self.force_parity {
            out.push("force_parity=true".into());
        }
        out
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// `.obj`, `.stl` or grid file. Defaults to `input` from the config.
    pub input: Option<PathBuf>,
    /// Abstraction JSON to write. Defaults to `output` from the config, else
    /// next to the input.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Also write the union of primitive tessellations as OBJ, in input units.
    #[arg(long, value_name = "FILE")]
    pub export_obj: Option<PathBuf>,
    /// Skip the Earth Mover's distance in the printed summary.
    #[arg(long)]
    pub skip_emd: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub abstraction: PathBuf,
    /// `.obj`, `.stl` or grid file.
    pub reference: PathBuf,
    /// Append one CSV row here, writing a header first if the file is new.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub skip_emd: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lattice resolution for mesh references. Defaults to the abstraction's.
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub force_parity: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    pub abstraction: PathBuf,
    /// `.obj`, `.stl` or grid file the abstraction was fitted to.
    pub reference: PathBuf,
    #[arg(long)]
    pub id: u32,
    #[arg(long, default_value_t = 2)]
    pub splits: usize,
    /// Written to stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// `.obj`, `.stl` or grid file the abstraction was fitted to.
    pub reference: PathBuf,
    pub abstraction: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub skip_emd: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct VoxelizeArgs {
    pub mesh: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    pub input: PathBuf,
    /// Label grid to write.
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}
