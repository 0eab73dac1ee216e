//! JSON interchange formats: fit reports, camera lists, 2D observations,
//! and the asset/augmentation manifests.

use std::path::{Path, PathBuf};

use facevol_core::fitting::{CameraPose, FitResult};
use facevol_core::{Landmarks68, TransformMatrix};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Result of a `fit` run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    /// Row-major 3x4 transform.
    pub transform: [f64; 12],
    pub landmarks: Vec<[f64; 3]>,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl From<&FitResult> for FitReport {
    fn from(r: &FitResult) -> Self {
        FitReport {
            identity: r.identity.0.clone(),
            expression: r.expression.0.clone(),
            transform: r.transform.to_row_major(),
            landmarks: r.landmarks.clone().into(),
            trace: r.trace.clone(),
            converged: r.converged,
            iterations: r.iterations,
        }
    }
}

impl FitReport {
    pub fn fitted_landmarks(&self) -> CliResult<Landmarks68> {
        Landmarks68::from_arrays(&self.landmarks)
            .map_err(|e| CliError::from_core(e, None))
    }

    pub fn transform_matrix(&self) -> CliResult<TransformMatrix> {
        TransformMatrix::from_row_major(&self.transform)
            .map_err(|e| CliError::from_core(e, None))
    }
}

/// Camera file: JSON list of row-major 3x4 projection matrices.
pub fn load_cameras(path: &Path) -> CliResult<Vec<CameraPose>> {
    let raw: Vec<Vec<f64>> = read_json(path)?;
    raw.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != 12 {
                return Err(CliError::Format {
                    path: Some(path.to_path_buf()),
                    message: format!("camera {i} has {} entries, expected 12", row.len()),
                });
            }
            let mut m = [0.0; 12];
            m.copy_from_slice(row);
            CameraPose::from_row_major(&m).map_err(|e| CliError::from_core(e, Some(path)))
        })
        .collect()
}

pub fn save_cameras(path: &Path, cameras: &[CameraPose]) -> CliResult<()> {
    let raw: Vec<Vec<f64>> = cameras.iter().map(|c| c.to_row_major().to_vec()).collect();
    write_json(path, &raw)
}

/// 2D observation file: per landmark, one `[u, v]` entry per camera.
pub fn load_observations(path: &Path, cameras: usize) -> CliResult<Vec<Vec<[f64; 2]>>> {
    let raw: Vec<Vec<[f64; 2]>> = read_json(path)?;
    for (i, per_point) in raw.iter().enumerate() {
        if per_point.len() != cameras {
            return Err(CliError::Format {
                path: Some(path.to_path_buf()),
                message: format!(
                    "point {i} has {} observations, expected one per camera ({cameras})",
                    per_point.len()
                ),
            });
        }
    }
    Ok(raw)
}

/// Assets produced by `synth` (and extended by `interpolate`): all paths are
/// relative to the manifest's own directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssetManifest {
    pub seed: u64,
    pub core: PathBuf,
    pub field: PathBuf,
    pub expressions: Vec<PathBuf>,
}

impl AssetManifest {
    pub fn load(path: &Path) -> CliResult<(Self, PathBuf)> {
        let manifest: Self = read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((manifest, dir))
    }
}

/// One item of an augmentation batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentItem {
    pub name: String,
    pub volume: PathBuf,
    pub landmarks: PathBuf,
    pub seed: u64,
    pub volume_hash: String,
    pub landmarks_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub mode: String,
    pub seed: u64,
    pub res: usize,
    pub threshold: f64,
    pub count: usize,
    pub items: Vec<AugmentItem>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| CliError::Format {
        path: Some(path.to_path_buf()),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec(value).map_err(|e| CliError::Format {
        path: Some(path.to_path_buf()),
        message: e.to_string(),
    })?;
    crate::commands::write_atomic(path, &bytes)
}
