//! Pipeline configuration: a UTF-8 `key = value` file plus flag overrides
//! (flags win). Relative paths in the file resolve against the config file's
//! directory. Defaults match the values the sampling and loss operations are
//! calibrated for: 64^3 volumes, density threshold 20, encoding L = 4, Wing
//! omega = 10, epsilon = 2, 110 expressions from a base set of 20.

use std::path::{Path, PathBuf};

use facevol_core::sampling::BoxConstants;
use facevol_core::WingParams;

use crate::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Volume resolution for sample/warp runs.
    pub res: usize,
    /// Volume resolution for augmentation batches (smoke-test scale).
    pub augment_res: usize,
    pub threshold: f64,
    /// Position-encoding frequency count; the volume file format pins L = 4.
    pub encoding_l: usize,
    pub encode: bool,
    pub wing_omega: f64,
    pub wing_epsilon: f64,
    pub box_face: f64,
    pub box_eye: f64,
    pub box_mouth: f64,
    pub box_enlarge: f64,
    pub n_exp: usize,
    pub n_id: usize,
    pub base_expressions: usize,
    pub expressions: usize,
    /// Node count per axis when baking the synthetic head field.
    pub grid_dims: usize,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            res: 64,
            augment_res: 32,
            threshold: 20.0,
            encoding_l: 4,
            encode: false,
            wing_omega: 10.0,
            wing_epsilon: 2.0,
            box_face: 0.7,
            box_eye: 0.18,
            box_mouth: 0.25,
            box_enlarge: 1.15,
            n_exp: 52,
            n_id: 50,
            base_expressions: 20,
            expressions: 110,
            grid_dims: 64,
            out_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    /// Parses a config file over the defaults.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config {}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim(), dir).map_err(|e| {
                CliError::Usage(format!(
                    "config {}:{}: {}",
                    path.display(),
                    lineno + 1,
                    e.message()
                ))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, dir: &Path) -> CliResult<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
            value
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "res" => self.res = num(key, value)?,
            "augment_res" => self.augment_res = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "encoding_l" => self.encoding_l = num(key, value)?,
            "encode" => self.encode = num(key, value)?,
            "wing_omega" => self.wing_omega = num(key, value)?,
            "wing_epsilon" => self.wing_epsilon = num(key, value)?,
            "box_face" => self.box_face = num(key, value)?,
            "box_eye" => self.box_eye = num(key, value)?,
            "box_mouth" => self.box_mouth = num(key, value)?,
            "box_enlarge" => self.box_enlarge = num(key, value)?,
            "n_exp" => self.n_exp = num(key, value)?,
            "n_id" => self.n_id = num(key, value)?,
            "base_expressions" => self.base_expressions = num(key, value)?,
            "expressions" => self.expressions = num(key, value)?,
            "grid_dims" => self.grid_dims = num(key, value)?,
            "out_dir" => {
                let p = PathBuf::from(value);
                self.out_dir = if p.is_absolute() { p } else { dir.join(p) };
            }
            other => {
                return Err(CliError::Usage(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.encoding_l != 4 {
            return Err(CliError::Usage(format!(
                "encoding_l must be 4 (the volume file format stores 31 channels), got {}",
                self.encoding_l
            )));
        }
        if self.n_exp == 0 || self.n_id == 0 {
            return Err(CliError::Usage("n_exp and n_id must be positive".into()));
        }
        if self.base_expressions == 0 {
            return Err(CliError::Usage("base_expressions must be positive".into()));
        }
        if self.expressions < self.base_expressions {
            return Err(CliError::Usage(format!(
                "expressions ({}) must be >= base_expressions ({})",
                self.expressions, self.base_expressions
            )));
        }
        WingParams::new(self.wing_omega, self.wing_epsilon)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn wing(&self) -> WingParams {
        WingParams::new(self.wing_omega, self.wing_epsilon).expect("validated")
    }

    pub fn box_constants(&self) -> BoxConstants {
        BoxConstants {
            face: self.box_face,
            eye: self.box_eye,
            mouth: self.box_mouth,
            enlargement: self.box_enlarge,
        }
    }
}
