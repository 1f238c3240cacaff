//! Atomic file output and the fitted-model file.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use symnrsfm::dataset::{Dataset, PoseRecord};
use symnrsfm::model::CameraPose;
use symnrsfm::pipeline::{Method, MethodConfig, Reconstruction};

use crate::{CliError, CliResult, EXIT_IO};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

/// Writes through a temporary file in the target directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Dataset::parse(&text).map_err(|e| io_err(path, e))
}

/// Poses and full shapes of a reconstruction, as written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub method: Method,
    pub settings: MethodConfig,
    pub poses: Vec<PoseRecord>,
    /// Per image, `2P` points: the primary half followed by the mirror half.
    pub shapes: Vec<Vec<[f64; 3]>>,
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FitFile {
    pub fn from_reconstruction(rec: &Reconstruction, settings: &MethodConfig) -> Self {
        Self {
            method: rec.method,
            settings: *settings,
            poses: rec.poses.iter().map(PoseRecord::from).collect(),
            shapes: rec.shapes.iter().map(|s| s.column_iter().map(|c| [c[0], c[1], c[2]]).collect()).collect(),
            energy_trace: rec.energy_trace.clone(),
            iterations: rec.iterations,
            converged: rec.converged,
            warnings: rec.warnings.clone(),
        }
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string(self).map_err(|e| CliError::new(EXIT_IO, e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }

    pub fn camera_poses(&self) -> Vec<CameraPose> {
        self.poses.iter().map(CameraPose::from).collect()
    }

    pub fn shapes(&self) -> CliResult<Vec<DMatrix<f64>>> {
        self.shapes
            .iter()
            .map(|pts| {
                if pts.is_empty() || pts.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(CliError::new(EXIT_IO, "model file holds an empty or non-finite shape"));
                }
                Ok(DMatrix::from_fn(3, pts.len(), |i, j| pts[j][i]))
            })
            .collect()
    }
}
