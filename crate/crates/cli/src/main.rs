use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use facevol_cli::commands::{
    self, AugmentMode, BoxSpec, SampleRegion,
};
use facevol_cli::config::PipelineConfig;
use facevol_cli::{CliError, CliResult};

/// 3D facial-landmark pipeline on sampled radiance fields: synthesize test
/// assets, sample and warp feature volumes, fit the bilinear landmark model,
/// triangulate, and evaluate.
///
/// Exit codes: 0 success, 2 usage error, 3 malformed input file, 4 numerical
/// failure. Failures print a machine-readable JSON error on stderr.
#[derive(Parser)]
#[command(name = "facevol", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config file (UTF-8 `key = value` lines); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every output byte is a function of (config, seed) [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: .]
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SamplingArgs {
    /// Volume resolution per axis [default: 64]
    #[arg(long)]
    res: Option<usize>,
    /// Density threshold; lower-density voxels are zeroed [default: 20]
    #[arg(long)]
    threshold: Option<f64>,
    /// Append the 27 position-encoding channels (L = 4)
    #[arg(long)]
    encode: bool,
}

impl SamplingArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(res) = self.res {
            cfg.res = res;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if self.encode {
            cfg.encode = true;
        }
    }
}

#[derive(Args)]
struct WingArgs {
    /// Wing loss omega [default: 10]
    #[arg(long)]
    omega: Option<f64>,
    /// Wing loss epsilon [default: 2]
    #[arg(long)]
    epsilon: Option<f64>,
}

impl WingArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.omega {
            cfg.wing_omega = v;
        }
        if let Some(v) = self.epsilon {
            cfg.wing_epsilon = v;
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Expression,
    Coarse,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    Face,
    LeftEye,
    RightEye,
    Mouth,
}

impl From<RegionArg> for SampleRegion {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Face => SampleRegion::Face,
            RegionArg::LeftEye => SampleRegion::LeftEye,
            RegionArg::RightEye => SampleRegion::RightEye,
            RegionArg::Mouth => SampleRegion::Mouth,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Emit synthetic assets: bilinear core, base expression landmark sets,
    /// baked head field, and an asset manifest
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Expression dimension of the synthetic core [default: 52]
        #[arg(long)]
        n_exp: Option<usize>,
        /// Identity dimension of the synthetic core [default: 50]
        #[arg(long)]
        n_id: Option<usize>,
        /// Number of base expression landmark sets [default: 20]
        #[arg(long)]
        base_expressions: Option<usize>,
        /// Bake resolution of the head field grid [default: 64]
        #[arg(long)]
        grid_dims: Option<usize>,
    },
    /// Extend the base expressions to a larger set by convex interpolation
    /// of random pairs (lambda uniform in (0,1)) [default count: 110]
    Interpolate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Asset manifest written by `synth`
        #[arg(long)]
        assets: PathBuf,
        /// Total expression count including the base set [default: 110]
        #[arg(long)]
        count: Option<usize>,
        /// Output manifest path [default: assets_interpolated.json next to the input]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch-produce augmented feature volumes with ground-truth landmarks
    /// and a manifest (written last; per-item files written atomically)
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Asset manifest (`synth` or `interpolate` output)
        #[arg(long)]
        assets: PathBuf,
        /// expression: TPS-warped volume per manifest expression;
        /// coarse: random scale/rotate/translate poses of the neutral head
        #[arg(long, value_enum, default_value = "expression")]
        mode: ModeArg,
        /// Batch volume resolution [default: 32; use 64 for full-fidelity runs]
        #[arg(long)]
        res: Option<usize>,
        /// Density threshold [default: 20]
        #[arg(long)]
        threshold: Option<f64>,
        /// Append position-encoding channels (L = 4)
        #[arg(long)]
        encode: bool,
        /// Worker pool size [default: one per CPU]
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Sample a feature volume from a stored field grid
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Field grid file (FLNV)
        #[arg(long)]
        field: PathBuf,
        /// Landmark file defining the fine-region boxes
        #[arg(long, required_unless_present = "center", conflicts_with_all = ["center", "half_extent"])]
        landmarks: Option<PathBuf>,
        /// Which fine region box to sample [default: face]
        #[arg(long, value_enum, default_value = "face")]
        region: RegionArg,
        /// Explicit box center `x,y,z` (alternative to --landmarks)
        #[arg(long, value_parser = parse_vec3, requires = "half_extent")]
        center: Option<[f64; 3]>,
        /// Explicit box half extent
        #[arg(long)]
        half_extent: Option<f64>,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Output volume file (FLNV)
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a TPS from two landmark sets and sample a warped volume showing
    /// the `--to` expression
    Warp {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Field grid file (FLNV) holding the `--from` expression
        #[arg(long)]
        field: PathBuf,
        /// Landmarks of the expression the field currently shows
        #[arg(long)]
        from: PathBuf,
        /// Landmarks of the expression the output volume should show
        #[arg(long)]
        to: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Output volume file (FLNV)
        #[arg(long)]
        out: PathBuf,
        /// Also write the fitted warp as JSON
        #[arg(long)]
        warp_out: Option<PathBuf>,
    },
    /// Fit the bilinear model and transform to observed landmarks
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Core tensor file (FLNC)
        #[arg(long)]
        core: PathBuf,
        /// Observed landmark file (JSON, 68 x [x,y,z])
        #[arg(long)]
        observed: PathBuf,
        /// Optional fit report whose parameters seed the optimizer
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        wing: WingArgs,
        /// Output report (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Triangulate 3D points from per-camera 2D observations (DLT)
    Triangulate {
        /// Camera file: JSON list of row-major 3x4 projection matrices
        #[arg(long)]
        cameras: PathBuf,
        /// Observations: per landmark, one [u,v] per camera
        #[arg(long)]
        points: PathBuf,
        /// Output landmark file (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Region-wise Wing metrics between predicted and ground-truth landmarks
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Predicted landmark file (JSON)
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth landmark file (JSON)
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        wing: WingArgs,
        /// Metrics output (JSON); printed to stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the occupied voxels of a volume as ASCII PLY
    ExportPly {
        /// Volume file (FLNV)
        #[arg(long)]
        volume: PathBuf,
        /// Output PLY path
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected `x,y,z`, got `{s}`"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("invalid number `{p}`"))?;
    }
    Ok(out)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            cfg,
            n_exp,
            n_id,
            base_expressions,
            grid_dims,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(v) = n_exp {
                cfg.n_exp = v;
            }
            if let Some(v) = n_id {
                cfg.n_id = v;
            }
            if let Some(v) = base_expressions {
                cfg.base_expressions = v;
            }
            if let Some(v) = grid_dims {
                cfg.grid_dims = v;
            }
            cfg.validate()?;
            let out = commands::cmd_synth(&cfg)?;
            println!(
                "wrote {} ({} expressions)",
                out.manifest_path.display(),
                out.expression_paths.len()
            );
        }
        Command::Interpolate {
            cfg,
            assets,
            count,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let count = count.unwrap_or(cfg.expressions);
            let path = commands::cmd_interpolate(&cfg, &assets, count, out)?;
            println!("wrote {} ({count} expressions)", path.display());
        }
        Command::Augment {
            cfg,
            assets,
            mode,
            res,
            threshold,
            encode,
            workers,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(v) = res {
                cfg.augment_res = v;
            }
            if let Some(v) = threshold {
                cfg.threshold = v;
            }
            if encode {
                cfg.encode = true;
            }
            let mode = match mode {
                ModeArg::Expression => AugmentMode::Expression,
                ModeArg::Coarse => AugmentMode::Coarse,
            };
            let path = commands::cmd_augment(&cfg, &assets, mode, None, workers)?;
            println!("wrote {}", path.display());
        }
        Command::Sample {
            cfg,
            field,
            landmarks,
            region,
            center,
            half_extent,
            sampling,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            sampling.apply(&mut cfg);
            let spec = match (landmarks, center) {
                (Some(lm), None) => BoxSpec::Region {
                    landmarks: lm,
                    region: region.into(),
                },
                (None, Some(center)) => BoxSpec::Explicit {
                    center,
                    half_extent: half_extent
                        .ok_or_else(|| CliError::Usage("--half-extent is required".into()))?,
                },
                _ => {
                    return Err(CliError::Usage(
                        "give either --landmarks or --center/--half-extent".into(),
                    ))
                }
            };
            let volume = commands::cmd_sample(&cfg, &field, &spec, &out)?;
            println!(
                "wrote {} ({} occupied voxels)",
                out.display(),
                volume.occupied_count()
            );
        }
        Command::Warp {
            cfg,
            field,
            from,
            to,
            sampling,
            out,
            warp_out,
        } => {
            let mut cfg = cfg.resolve()?;
            sampling.apply(&mut cfg);
            let volume =
                commands::cmd_warp(&cfg, &field, &from, &to, &out, warp_out.as_deref())?;
            println!(
                "wrote {} ({} occupied voxels)",
                out.display(),
                volume.occupied_count()
            );
        }
        Command::Fit {
            cfg,
            core,
            observed,
            init,
            wing,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            wing.apply(&mut cfg);
            cfg.validate()?;
            let report = commands::cmd_fit(&cfg, &core, &observed, &out, init.as_deref())?;
            println!(
                "wrote {} (converged: {}, iterations: {}, final loss: {:.3e})",
                out.display(),
                report.converged,
                report.iterations,
                report.trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Triangulate {
            cameras,
            points,
            out,
        } => {
            let summary = commands::cmd_triangulate(&cameras, &points, &out)?;
            println!(
                "wrote {} ({} points, mean reprojection rms {:.3e} px)",
                out.display(),
                summary.points,
                summary.mean_rms
            );
        }
        Command::Eval {
            cfg,
            pred,
            gt,
            wing,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            wing.apply(&mut cfg);
            cfg.validate()?;
            let report = commands::cmd_eval(&cfg, &pred, &gt, out.as_deref())?;
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serialization")
            );
        }
        Command::ExportPly { volume, out } => {
            let count = commands::cmd_export_ply(&volume, &out)?;
            println!("wrote {} ({count} vertices)", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::to_string(&err.to_json()).expect("error serialization")
            );
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
