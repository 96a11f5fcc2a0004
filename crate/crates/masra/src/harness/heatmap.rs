//! Similarity-matrix export for qualitative inspection.

use super::train::Checkpoint;
use crate::error::{Error, Result};
use crate::lrca::SimilarityMatrix;
use crate::nn::Tensor2D;
use crate::synth::io::Dataset;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Which similarity stage to export. `NoLrca` is the label used when the
/// checkpoint was trained without relational alignment; it exports the same
/// pre-refinement matrix as `PreSora`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapStage {
    NoLrca,
    PreSora,
    PostSora,
}

impl HeatmapStage {
    pub const VALID: &'static [&'static str] = &["no_lrca", "pre_sora", "post_sora"];

    pub fn as_str(&self) -> &'static str {
        match self {
            HeatmapStage::NoLrca => "no_lrca",
            HeatmapStage::PreSora => "pre_sora",
            HeatmapStage::PostSora => "post_sora",
        }
    }
}

impl FromStr for HeatmapStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_lrca" => Ok(HeatmapStage::NoLrca),
            "pre_sora" => Ok(HeatmapStage::PreSora),
            "post_sora" => Ok(HeatmapStage::PostSora),
            other => Err(Error::InvalidArg {
                op: "heatmap stage",
                reason: format!(
                    "unknown stage `{other}`; valid stages: {}",
                    Self::VALID.join(", ")
                ),
            }),
        }
    }
}

/// Write the TxT similarity grid for one scenario at the requested stage,
/// plus a length-T 0/1 ground-truth mask sidecar (one value per line).
/// Returns the two file paths.
pub fn emit_heatmap(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    scenario_id: u64,
    stage: HeatmapStage,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let idx = dataset
        .manifest
        .records
        .iter()
        .position(|r| r.id == scenario_id)
        .ok_or_else(|| Error::InvalidArg {
            op: "emit_heatmap",
            reason: format!("scenario {scenario_id} not in dataset"),
        })?;
    let scenario = dataset.load_record(idx)?;
    let (model, store) = checkpoint.build_model()?;
    let out = model.infer(&store, &scenario.video, &scenario.query)?;
    let grid = match stage {
        HeatmapStage::NoLrca | HeatmapStage::PreSora => out.similarity,
        HeatmapStage::PostSora => out.refined_similarity,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let grid_path = out_dir.join(format!("{}_{scenario_id}.csv", stage.as_str()));
    SimilarityMatrix::new(Tensor2D::new(grid)?)?.write_csv(&grid_path)?;
    let mask_path = out_dir.join(format!("gt_mask_{scenario_id}.csv"));
    let mask: String = scenario
        .saliency_gt
        .iter()
        .map(|&v| if v > 0.5 { "1\n" } else { "0\n" })
        .collect();
    std::fs::write(&mask_path, mask).map_err(|e| Error::io(&mask_path, e))?;
    Ok((grid_path, mask_path))
}

/// Within-block mean similarity minus cross-block mean, where the block is
/// the ground-truth span: the contrast statistic used to compare heatmaps.
pub fn block_contrast(grid: &[Vec<f64>], mask: &[bool]) -> f64 {
    let t = mask.len();
    let mut within = (0.0, 0usize);
    let mut cross = (0.0, 0usize);
    for i in 0..t {
        for j in 0..t {
            if i == j {
                continue;
            }
            if mask[i] && mask[j] {
                within.0 += grid[i][j];
                within.1 += 1;
            } else if mask[i] != mask[j] {
                cross.0 += grid[i][j];
                cross.1 += 1;
            }
        }
    }
    within.0 / within.1.max(1) as f64 - cross.0 / cross.1.max(1) as f64
}

/// Parse a grid CSV written by [`emit_heatmap`].
pub fn read_grid_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.trim_end()
        .lines()
        .map(|line| {
            line.split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::CorruptRecord {
                        record: path.display().to_string(),
                        reason: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Parse a 0/1 mask sidecar.
pub fn read_mask_csv(path: &Path) -> Result<Vec<bool>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .trim_end()
        .lines()
        .map(|l| l.trim() == "1")
        .collect())
}
