//! Grid search over model widths and learning rate.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, TrainError};
use crate::models::ModelSpec;
use crate::train::{train, SequenceSource, TrainConfig};

pub const RESULT_FILE: &str = "result.json";
pub const RANKING_FILE: &str = "ranking.txt";

/// A base spec and the values tried for each axis. Empty axes keep the base
/// value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub base: ModelSpec,
    #[serde(default)]
    pub layers_per_db: Vec<usize>,
    #[serde(default)]
    pub growth: Vec<usize>,
    #[serde(default)]
    pub first_conv_features: Vec<usize>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub spec: ModelSpec,
    pub learning_rate: f64,
}

impl GridCell {
    pub fn label(&self) -> String {
        format!(
            "L={} k={} m={} lr={}",
            self.spec.layers_per_db, self.spec.growth, self.spec.first_conv_features, self.learning_rate
        )
    }

    fn dir_name(&self) -> String {
        format!("cell-{:03}", self.index)
    }
}

impl GridSpec {
    /// Cartesian product of the axes, last axis fastest.
    pub fn cells(&self, default_lr: f64) -> Vec<GridCell> {
        let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
        let lrs = if self.learning_rate.is_empty() {
            vec![default_lr]
        } else {
            self.learning_rate.clone()
        };
        let mut out = Vec::new();
        for l in or(&self.layers_per_db, self.base.layers_per_db) {
            for k in or(&self.growth, self.base.growth) {
                for m in or(&self.first_conv_features, self.base.first_conv_features) {
                    for &lr in &lrs {
                        out.push(GridCell {
                            index: out.len(),
                            spec: ModelSpec {
                                layers_per_db: l,
                                growth: k,
                                first_conv_features: m,
                                ..self.base.clone()
                            },
                            learning_rate: lr,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cell: GridCell,
    pub best_val_miou: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub params: usize,
}

/// Results sorted by validation mean IoU, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking(pub Vec<GridResult>);

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<5} {:<6} {:<36} {:>10} {:>10} {:>7}", "rank", "cell", "config", "params", "val mIoU", "epoch")?;
        for (i, r) in self.0.iter().enumerate() {
            writeln!(
                f,
                "{:<5} {:<6} {:<36} {:>10} {:>10.2} {:>7}",
                i + 1,
                r.cell.index,
                r.cell.label(),
                r.params,
                100.0 * r.best_val_miou,
                r.best_epoch
            )?;
        }
        Ok(())
    }
}

/// Trains every cell of `grid` with the same budget `cfg` and ranks them.
/// Each cell writes its logs and checkpoints to `out_dir/cell-NNN`; cells
/// whose result file already matches are not trained again.
pub fn grid_search(
    grid: &GridSpec,
    train_data: &mut dyn SequenceSource,
    val_data: &mut dyn SequenceSource,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Ranking, TrainError> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut results = Vec::new();
    for cell in grid.cells(cfg.learning_rate) {
        let dir = out_dir.join(cell.dir_name());
        let result_path = dir.join(RESULT_FILE);
        if let Ok(text) = fs::read_to_string(&result_path) {
            if let Ok(done) = serde_json::from_str::<GridResult>(&text) {
                if done.cell == cell {
                    results.push(done);
                    continue;
                }
            }
        }
        if dir.exists() {
            // leftovers of an interrupted or different run
            fs::remove_dir_all(&dir).at(&dir)?;
        }
        let cell_cfg = TrainConfig {
            learning_rate: cell.learning_rate,
            ..cfg.clone()
        };
        let outcome = train(&cell.spec, train_data, val_data, &cell_cfg, Some(&dir))?;
        let result = GridResult {
            params: crate::models::ParamTable::from_store(&outcome.best.params).total,
            best_val_miou: outcome.best.best_val_miou,
            best_epoch: outcome.best.epoch,
            epochs_run: outcome.history.len(),
            cell,
        };
        let json = serde_json::to_string_pretty(&result).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let tmp = dir.join("result.tmp");
        fs::write(&tmp, json).at(&tmp)?;
        fs::rename(&tmp, &result_path).at(&result_path)?;
        results.push(result);
    }
    results.sort_by(|a, b| b.best_val_miou.total_cmp(&a.best_val_miou).then(a.cell.index.cmp(&b.cell.index)));
    let ranking = Ranking(results);
    let path = out_dir.join(RANKING_FILE);
    fs::write(&path, ranking.to_string()).at(&path)?;
    Ok(ranking)
}

#[cfg(test)]
mod tests;
