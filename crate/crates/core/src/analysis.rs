//! Transfer-difficulty and residual analysis instruments.

use serde::{Deserialize, Serialize};

use crate::classifier::TaskResidual;
use crate::embedding_io::Bundle;
use crate::error::{Error, Result};
use crate::trainer::{mean, sample_std, train, AlphaSetting, TrainConfig};

/// Chance-level accuracy divided by zero-shot accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub task: String,
    pub num_classes: usize,
    pub zero_shot_accuracy: f64,
    pub difficulty: f64,
    pub log_difficulty: f64,
}

impl DifficultyRecord {
    pub fn named(mut self, task: impl Into<String>) -> Self {
        self.task = task.into();
        self
    }
}

pub fn relative_transfer_difficulty(
    num_classes: usize,
    zero_shot_accuracy: f64,
) -> Result<DifficultyRecord> {
    if num_classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if !(zero_shot_accuracy > 0.0 && zero_shot_accuracy <= 1.0) {
        return Err(Error::invalid(format!(
            "zero-shot accuracy must be in (0, 1], got {zero_shot_accuracy}"
        )));
    }
    let difficulty = (1.0 / num_classes as f64) / zero_shot_accuracy;
    Ok(DifficultyRecord {
        task: String::new(),
        num_classes,
        zero_shot_accuracy,
        difficulty,
        log_difficulty: difficulty.ln(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeStats {
    /// Mean absolute entry over all K·D values.
    pub mean: f64,
    pub median: f64,
    /// Mean absolute entry of each row.
    pub per_class_mean: Vec<f64>,
}

impl MagnitudeStats {
    /// Statistics of `values`, viewed as `rows` equal-length rows.
    pub fn of_values(values: &[f64], rows: usize) -> Self {
        let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        let cols = values.len().checked_div(rows).unwrap_or(0);
        let per_class_mean = if cols == 0 {
            Vec::new()
        } else {
            abs.chunks(cols)
                .map(|c| c.iter().sum::<f64>() / cols as f64)
                .collect()
        };
        let mean = if abs.is_empty() {
            0.0
        } else {
            abs.iter().sum::<f64>() / abs.len() as f64
        };
        abs.sort_by(f64::total_cmp);
        Self {
            mean,
            median: median_sorted(&abs),
            per_class_mean,
        }
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

pub fn residual_magnitude(x: &TaskResidual) -> MagnitudeStats {
    MagnitudeStats::of_values(x.values.data(), x.values.rows())
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "spearman inputs".into(),
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 points, got {}",
            x.len()
        )));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid(
            "rank correlation undefined for constant input",
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman ρ between log difficulty and mean residual magnitude.
pub fn magnitude_difficulty_correlation(
    records: &[(DifficultyRecord, MagnitudeStats)],
) -> Result<f64> {
    if records.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 records, got {}",
            records.len()
        )));
    }
    let x: Vec<f64> = records.iter().map(|(d, _)| d.log_difficulty).collect();
    let y: Vec<f64> = records.iter().map(|(_, m)| m.mean).collect();
    spearman(&x, &y)
}

/// Wrong-to-right and right-to-wrong counts between two prediction sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryShift {
    pub w2r: usize,
    pub r2w: usize,
}

pub fn boundary_shift(
    base_labels: &[usize],
    tuned_labels: &[usize],
    true_labels: &[usize],
) -> Result<BoundaryShift> {
    if base_labels.len() != true_labels.len() || tuned_labels.len() != true_labels.len() {
        return Err(Error::DimensionMismatch {
            what: "prediction lengths".into(),
            expected: true_labels.len(),
            found: if base_labels.len() != true_labels.len() {
                base_labels.len()
            } else {
                tuned_labels.len()
            },
        });
    }
    let mut out = BoundaryShift::default();
    for ((b, t), y) in base_labels.iter().zip(tuned_labels).zip(true_labels) {
        match (b == y, t == y) {
            (false, true) => out.w2r += 1,
            (true, false) => out.r2w += 1,
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: AlphaSetting,
    /// Fixed α, or the seed-mean of tanh(raw) after training.
    pub alpha: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_zero_shot_accuracy: f64,
}

/// Trains the configured residual variant once per α with shared seeds.
pub fn alpha_sweep(
    bundle: &Bundle,
    config: &TrainConfig,
    alphas: &[AlphaSetting],
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::invalid("alpha sweep needs at least one value"));
    }
    if !config.variant.is_residual() {
        return Err(Error::invalid(format!(
            "alpha sweep needs a residual variant, got {}",
            config.variant
        )));
    }
    alphas
        .iter()
        .map(|&setting| {
            let report = train(
                bundle,
                &TrainConfig {
                    alpha: setting,
                    ..config.clone()
                },
            )?;
            let accs: Vec<f64> = report.seeds.iter().map(|s| s.test_accuracy).collect();
            let alpha = match setting {
                AlphaSetting::Fixed(a) => a,
                AlphaSetting::Learnable(_) => report.learned_alpha_mean().unwrap_or(f64::NAN),
            };
            Ok(SweepRow {
                setting,
                alpha,
                mean_accuracy: mean(&accs),
                std_accuracy: sample_std(&accs),
                mean_zero_shot_accuracy: report.mean_zero_shot_accuracy,
            })
        })
        .collect()
}
