//! Command implementations. Every command is reproducible: the (config,
//! seed) pair fully determines all output bytes. Output files are written
//! atomically (temp file, then rename) and batch manifests are written last.

use std::path::{Path, PathBuf};

use facevol_core::face_model::{
    generate_landmarks, synth_core, ExpressionWeights, IdentityWeights, Landmarks68,
};
use facevol_core::field::{bake_to_grid, SyntheticHeadField, VoxelGridField};
use facevol_core::fitting::{evaluate, fit_landmarks, triangulate, EvalReport, FitProblem};
use facevol_core::sampling::{
    apply_augment, fine_boxes_with, random_augment, sample_volume, FeatureVolume, OrientedBox,
};
use facevol_core::tps::{fit_tps, warp_sample, TpsWarp};
use facevol_core::TransformMatrix;
use nalgebra::Point3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::report::{
    load_cameras, load_observations, read_json, write_json, AssetManifest, AugmentItem,
    AugmentManifest, FitReport,
};
use crate::{CliError, CliResult};

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    let io_err = |e: std::io::Error| {
        CliError::Usage(format!("cannot write {}: {e}", path.display()))
    };
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// FNV-1a 64-bit content hash, hex-encoded; used for manifest integrity.
pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Independent per-purpose RNG streams derived from the pipeline seed.
fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 over (seed, tag, index)
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const TAG_WEIGHTS: u64 = 1;
const TAG_INTERP: u64 = 2;
const TAG_POSE: u64 = 3;

fn core_err(path: &Path) -> impl Fn(facevol_core::Error) -> CliError + '_ {
    move |e| CliError::from_core(e, Some(path))
}

pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub core_path: PathBuf,
    pub field_path: PathBuf,
    pub expression_paths: Vec<PathBuf>,
}

/// Emits the synthetic assets: one bilinear core, `base_expressions`
/// landmark sets (the first is neutral), one baked head field, and a
/// manifest listing them.
pub fn cmd_synth(cfg: &PipelineConfig) -> CliResult<SynthOutput> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;

    let core = synth_core(cfg.seed, cfg.n_exp, cfg.n_id)
        .map_err(|e| CliError::from_core(e, None))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_WEIGHTS, 0));

    // One identity per asset set: positive weights, unit sum, so every face
    // is a convex blend of the core's deformation modes.
    let mut id_raw: Vec<f64> = (0..cfg.n_id).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = id_raw.iter().sum();
    for v in id_raw.iter_mut() {
        *v /= total;
    }
    let identity = IdentityWeights(id_raw);

    let mut expression_paths = Vec::new();
    let mut neutral = None;
    for i in 0..cfg.base_expressions {
        let mut w = vec![0.0; cfg.n_exp];
        w[0] = 1.0;
        if i > 0 && cfg.n_exp >= 2 {
            let alpha: f64 = rng.random_range(0.4..0.9);
            let j = 1 + (i - 1) % (cfg.n_exp - 1);
            w[0] = 1.0 - alpha;
            w[j] = alpha;
        }
        let lm = generate_landmarks(&core, &identity, &ExpressionWeights(w))
            .map_err(|e| CliError::from_core(e, None))?;
        if i == 0 {
            neutral = Some(lm.clone());
        }
        let path = out.join(format!("expr_{i:03}.json"));
        let bytes = serde_json::to_vec(&lm).expect("landmark serialization");
        write_atomic(&path, &bytes)?;
        expression_paths.push(path);
    }
    let neutral = neutral.expect("base_expressions >= 1");

    let core_path = out.join("core.flnc");
    let mut core_bytes = Vec::new();
    core.write_to(&mut core_bytes)
        .map_err(|e| CliError::from_core(e, None))?;
    write_atomic(&core_path, &core_bytes)?;

    let head = SyntheticHeadField::new(&neutral, cfg.seed)
        .map_err(|e| CliError::from_core(e, None))?;
    let grid = bake_to_grid(
        &head,
        Point3::new(-1.0, -1.0, -1.0),
        nalgebra::Vector3::new(2.0, 2.0, 2.0),
        [cfg.grid_dims; 3],
    )
    .map_err(|e| CliError::from_core(e, None))?;
    let field_path = out.join("head.flnv");
    let mut grid_bytes = Vec::new();
    grid.write_to(&mut grid_bytes)
        .map_err(|e| CliError::from_core(e, None))?;
    write_atomic(&field_path, &grid_bytes)?;

    let manifest = AssetManifest {
        seed: cfg.seed,
        core: PathBuf::from("core.flnc"),
        field: PathBuf::from("head.flnv"),
        expressions: expression_paths
            .iter()
            .map(|p| PathBuf::from(p.file_name().unwrap()))
            .collect(),
    };
    let manifest_path = out.join("assets.json");
    write_json(&manifest_path, &manifest)?;

    Ok(SynthOutput {
        manifest_path,
        core_path,
        field_path,
        expression_paths,
    })
}

/// Pointwise convex combination `lambda * a + (1 - lambda) * b`.
pub fn interpolate_landmarks(a: &Landmarks68, b: &Landmarks68, lambda: f64) -> Landmarks68 {
    let pts: Vec<[f64; 3]> = a
        .points()
        .iter()
        .zip(b.points())
        .map(|(pa, pb)| {
            [
                lambda * pa.x + (1.0 - lambda) * pb.x,
                lambda * pa.y + (1.0 - lambda) * pb.y,
                lambda * pa.z + (1.0 - lambda) * pb.z,
            ]
        })
        .collect();
    Landmarks68::from_arrays(&pts).expect("convex combination of finite landmarks")
}

/// Extends the base expression set to `count` members by interpolating
/// randomly paired base sets with `lambda` uniform in (0, 1). Returns the
/// path of the extended manifest.
pub fn cmd_interpolate(
    cfg: &PipelineConfig,
    assets: &Path,
    count: usize,
    out_manifest: Option<PathBuf>,
) -> CliResult<PathBuf> {
    let (manifest, dir) = AssetManifest::load(assets)?;
    let out_path = out_manifest.unwrap_or_else(|| dir.join("assets_interpolated.json"));
    if out_path.parent().unwrap_or(Path::new(".")) != dir.as_path() {
        return Err(CliError::Usage(
            "interpolated manifest must live in the asset directory".into(),
        ));
    }

    let base: Vec<Landmarks68> = manifest
        .expressions
        .iter()
        .map(|rel| {
            let p = dir.join(rel);
            Landmarks68::load_json(&p).map_err(|e| CliError::from_core(e, Some(&p)))
        })
        .collect::<CliResult<_>>()?;
    if count < base.len() {
        return Err(CliError::Usage(format!(
            "count ({count}) must be at least the base set size ({})",
            base.len()
        )));
    }
    let extra = count - base.len();
    if extra > 0 && base.len() < 2 {
        return Err(CliError::Usage(
            "interpolation needs at least 2 base expressions".into(),
        ));
    }

    let mut expressions = manifest.expressions.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_INTERP, 0));
    for k in 0..extra {
        let a = rng.random_range(0..base.len());
        let b = loop {
            let b = rng.random_range(0..base.len());
            if b != a {
                break b;
            }
        };
        let lambda: f64 = rng.random_range(f64::EPSILON..1.0);
        let lm = interpolate_landmarks(&base[a], &base[b], lambda);
        let name = format!("interp_{k:03}.json");
        let bytes = serde_json::to_vec(&lm).expect("landmark serialization");
        write_atomic(&dir.join(&name), &bytes)?;
        expressions.push(PathBuf::from(name));
    }

    let out = AssetManifest {
        seed: cfg.seed,
        core: manifest.core,
        field: manifest.field,
        expressions,
    };
    write_json(&out_path, &out)?;
    Ok(out_path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// One TPS-warped volume per expression in the manifest.
    Expression,
    /// Pose/scale augmentation of the neutral head: one random
    /// scale-rotate-translate draw per item.
    Coarse,
}

impl AugmentMode {
    fn as_str(&self) -> &'static str {
        match self {
            AugmentMode::Expression => "expression",
            AugmentMode::Coarse => "coarse",
        }
    }
}

/// Runs an augmentation batch over the manifest's expressions, writing one
/// feature volume and one ground-truth landmark file per item plus a final
/// manifest. Items run on a worker pool; outputs are bit-reproducible for a
/// fixed (config, seed) regardless of worker count.
pub fn cmd_augment(
    cfg: &PipelineConfig,
    assets: &Path,
    mode: AugmentMode,
    out_dir: Option<PathBuf>,
    workers: Option<usize>,
) -> CliResult<PathBuf> {
    let (manifest, dir) = AssetManifest::load(assets)?;
    let out = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;

    let field_path = dir.join(&manifest.field);
    let field = VoxelGridField::load(&field_path).map_err(core_err(&field_path))?;
    let expressions: Vec<Landmarks68> = manifest
        .expressions
        .iter()
        .map(|rel| {
            let p = dir.join(rel);
            Landmarks68::load_json(&p).map_err(|e| CliError::from_core(e, Some(&p)))
        })
        .collect::<CliResult<_>>()?;
    if expressions.is_empty() {
        return Err(CliError::Usage("asset manifest lists no expressions".into()));
    }
    let neutral = &expressions[0];
    let count = match mode {
        AugmentMode::Expression => expressions.len(),
        AugmentMode::Coarse => cfg.expressions,
    };

    let run = |i: usize| -> CliResult<AugmentItem> {
        let item_seed = stream_seed(cfg.seed, TAG_POSE, i as u64);
        let (name, volume, gt) = match mode {
            AugmentMode::Expression => {
                let target = &expressions[i];
                // The neutral item must reproduce the unwarped sample
                // bit-exactly, so it bypasses the fitted (inexact) warp.
                let warp = if target == neutral {
                    TpsWarp::identity()
                } else {
                    fit_tps(target.points(), neutral.points())
                        .map_err(|e| CliError::from_core(e, None))?
                };
                let boxes = fine_boxes_with(
                    target,
                    &TransformMatrix::identity(),
                    &cfg.box_constants(),
                )
                .map_err(|e| CliError::from_core(e, None))?;
                let volume = warp_sample(
                    &field,
                    &warp,
                    &boxes.face,
                    cfg.augment_res,
                    cfg.threshold,
                    cfg.encode,
                )
                .map_err(|e| CliError::from_core(e, None))?;
                (format!("expr_{i:03}"), volume, target.clone())
            }
            AugmentMode::Coarse => {
                let augment = random_augment(item_seed);
                let base = OrientedBox::axis_aligned(Point3::origin(), 1.0)
                    .expect("unit box is valid");
                let sample_box = apply_augment(&augment, &base);
                let volume = sample_volume(
                    &field,
                    &sample_box,
                    cfg.augment_res,
                    cfg.threshold,
                    cfg.encode,
                )
                .map_err(|e| CliError::from_core(e, None))?;
                // Ground truth in volume coordinates: where the head's
                // landmarks land inside the augmented sampling box.
                let pts: Vec<[f64; 3]> = neutral
                    .points()
                    .iter()
                    .map(|p| {
                        let s = augment.unmap_position(p);
                        [s.x, s.y, s.z]
                    })
                    .collect();
                let gt = Landmarks68::from_arrays(&pts)
                    .map_err(|e| CliError::from_core(e, None))?;
                (format!("pose_{i:03}"), volume, gt)
            }
        };

        let vol_name = format!("vol_{name}.flnv");
        let gt_name = format!("gt_{name}.json");
        let mut vol_bytes = Vec::new();
        volume
            .write_to(&mut vol_bytes)
            .map_err(|e| CliError::from_core(e, None))?;
        let gt_bytes = serde_json::to_vec(&gt).expect("landmark serialization");
        write_atomic(&out.join(&vol_name), &vol_bytes)?;
        write_atomic(&out.join(&gt_name), &gt_bytes)?;
        Ok(AugmentItem {
            name,
            volume: PathBuf::from(vol_name),
            landmarks: PathBuf::from(gt_name),
            seed: item_seed,
            volume_hash: fnv1a64_hex(&vol_bytes),
            landmarks_hash: fnv1a64_hex(&gt_bytes),
        })
    };

    let items: CliResult<Vec<AugmentItem>> = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot build worker pool: {e}")))?
            .install(|| (0..count).into_par_iter().map(run).collect()),
        None => (0..count).into_par_iter().map(run).collect(),
    };

    let manifest = AugmentManifest {
        mode: mode.as_str().to_string(),
        seed: cfg.seed,
        res: cfg.augment_res,
        threshold: cfg.threshold,
        count,
        items: items?,
    };
    let manifest_path = out.join("augment_manifest.json");
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleRegion {
    Face,
    LeftEye,
    RightEye,
    Mouth,
}

#[derive(Debug, Clone)]
pub enum BoxSpec {
    /// Fine region box derived from a landmark file.
    Region {
        landmarks: PathBuf,
        region: SampleRegion,
    },
    /// Explicit axis-aligned cube.
    Explicit {
        center: [f64; 3],
        half_extent: f64,
    },
}

fn resolve_box(cfg: &PipelineConfig, spec: &BoxSpec) -> CliResult<OrientedBox> {
    match spec {
        BoxSpec::Region { landmarks, region } => {
            let lm =
                Landmarks68::load_json(landmarks).map_err(|e| CliError::from_core(e, Some(landmarks)))?;
            let boxes = fine_boxes_with(&lm, &TransformMatrix::identity(), &cfg.box_constants())
                .map_err(|e| CliError::from_core(e, None))?;
            Ok(match region {
                SampleRegion::Face => boxes.face,
                SampleRegion::LeftEye => boxes.left_eye,
                SampleRegion::RightEye => boxes.right_eye,
                SampleRegion::Mouth => boxes.mouth,
            })
        }
        BoxSpec::Explicit {
            center,
            half_extent,
        } => OrientedBox::axis_aligned(Point3::new(center[0], center[1], center[2]), *half_extent)
            .map_err(|e| CliError::from_core(e, None)),
    }
}

/// Samples a feature volume from a stored field grid.
pub fn cmd_sample(
    cfg: &PipelineConfig,
    field_path: &Path,
    spec: &BoxSpec,
    out: &Path,
) -> CliResult<FeatureVolume> {
    let field = VoxelGridField::load(field_path).map_err(core_err(field_path))?;
    let sample_box = resolve_box(cfg, spec)?;
    let volume = sample_volume(&field, &sample_box, cfg.res, cfg.threshold, cfg.encode)
        .map_err(|e| CliError::from_core(e, None))?;
    let mut bytes = Vec::new();
    volume
        .write_to(&mut bytes)
        .map_err(|e| CliError::from_core(e, None))?;
    write_atomic(out, &bytes)?;
    Ok(volume)
}

/// Warp-samples a field so the output volume shows the `to` expression:
/// fits the pull-back TPS (`to` landmarks -> `from` landmarks) and samples
/// over the face box of the `to` set.
pub fn cmd_warp(
    cfg: &PipelineConfig,
    field_path: &Path,
    from: &Path,
    to: &Path,
    out: &Path,
    warp_out: Option<&Path>,
) -> CliResult<FeatureVolume> {
    let field = VoxelGridField::load(field_path).map_err(core_err(field_path))?;
    let from_lm = Landmarks68::load_json(from).map_err(|e| CliError::from_core(e, Some(from)))?;
    let to_lm = Landmarks68::load_json(to).map_err(|e| CliError::from_core(e, Some(to)))?;
    let warp = fit_tps(to_lm.points(), from_lm.points())
        .map_err(|e| CliError::from_core(e, None))?;
    let boxes = fine_boxes_with(&to_lm, &TransformMatrix::identity(), &cfg.box_constants())
        .map_err(|e| CliError::from_core(e, None))?;
    let volume = warp_sample(
        &field,
        &warp,
        &boxes.face,
        cfg.res,
        cfg.threshold,
        cfg.encode,
    )
    .map_err(|e| CliError::from_core(e, None))?;
    let mut bytes = Vec::new();
    volume
        .write_to(&mut bytes)
        .map_err(|e| CliError::from_core(e, None))?;
    write_atomic(out, &bytes)?;
    if let Some(wp) = warp_out {
        let wb = serde_json::to_vec(&warp).expect("warp serialization");
        write_atomic(wp, &wb)?;
    }
    Ok(volume)
}

/// Fits the bilinear model and transform to observed landmarks and writes a
/// JSON report. A fit that hits the iteration cap is reported with
/// `converged: false`, not treated as a process failure.
pub fn cmd_fit(
    cfg: &PipelineConfig,
    core_path: &Path,
    observed_path: &Path,
    out: &Path,
    init: Option<&Path>,
) -> CliResult<FitReport> {
    let core = facevol_core::BilinearCore::load(core_path).map_err(core_err(core_path))?;
    let observed = Landmarks68::load_json(observed_path)
        .map_err(|e| CliError::from_core(e, Some(observed_path)))?;
    let mut problem = FitProblem::new(&core, &observed).with_wing(cfg.wing());
    if let Some(init_path) = init {
        let report: FitReport = read_json(init_path)?;
        let transform = report.transform_matrix()?;
        problem = problem.with_initial(
            IdentityWeights(report.identity.clone()),
            ExpressionWeights(report.expression.clone()),
            transform,
        );
    }
    let result = fit_landmarks(&problem).map_err(|e| CliError::from_core(e, None))?;
    let report = FitReport::from(&result);
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TriangulateSummary {
    pub points: usize,
    pub mean_rms: f64,
    pub max_rms: f64,
}

/// Triangulates one 3D point per landmark from per-camera 2D observations.
pub fn cmd_triangulate(
    cameras_path: &Path,
    points_path: &Path,
    out: &Path,
) -> CliResult<TriangulateSummary> {
    let cameras = load_cameras(cameras_path)?;
    let observations = load_observations(points_path, cameras.len())?;
    let mut landmarks: Vec<[f64; 3]> = Vec::with_capacity(observations.len());
    let mut rms = Vec::with_capacity(observations.len());
    for per_point in &observations {
        let obs: Vec<_> = cameras
            .iter()
            .zip(per_point)
            .map(|(c, uv)| (*c, *uv))
            .collect();
        let got = triangulate(&obs).map_err(|e| CliError::from_core(e, None))?;
        landmarks.push([got.point.x, got.point.y, got.point.z]);
        rms.push(got.reprojection_rms);
    }
    write_json(out, &landmarks)?;
    let mean_rms = rms.iter().sum::<f64>() / rms.len().max(1) as f64;
    let max_rms = rms.iter().cloned().fold(0.0, f64::max);
    Ok(TriangulateSummary {
        points: landmarks.len(),
        mean_rms,
        max_rms,
    })
}

/// Region-wise Wing metrics between predicted and ground-truth landmarks.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    pred_path: &Path,
    gt_path: &Path,
    out: Option<&Path>,
) -> CliResult<EvalReport> {
    let pred =
        Landmarks68::load_json(pred_path).map_err(|e| CliError::from_core(e, Some(pred_path)))?;
    let gt = Landmarks68::load_json(gt_path).map_err(|e| CliError::from_core(e, Some(gt_path)))?;
    let report = evaluate(&pred, &gt, &cfg.wing());
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Dumps the occupied voxels of a stored volume as ASCII PLY.
pub fn cmd_export_ply(volume_path: &Path, out: &Path) -> CliResult<usize> {
    let volume = FeatureVolume::load(volume_path).map_err(core_err(volume_path))?;
    let mut bytes = Vec::new();
    volume
        .export_ply(&mut bytes)
        .map_err(|e| CliError::from_core(e, None))?;
    write_atomic(out, &bytes)?;
    Ok(volume.occupied_count())
}
