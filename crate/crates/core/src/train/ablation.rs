use std::time::Instant;

use super::eval::evaluate_nll;
use super::trainer::train_on;
use super::{MetricsRow, MetricsTable, Result, TrainConfig};
use crate::model::Variant;
use crate::processes::Dataset;

/// One dataset of an ablation with its three splits.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub name: String,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Trains and evaluates every (dataset, variant, seed) combination with the
/// settings of `base`, then appends the per-cell means. Checkpoints go next
/// to `base.checkpoint` with the cell appended to the file stem.
pub fn run_ablation(
    cells: &[AblationCell],
    variants: &[Variant],
    base: &TrainConfig,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    let stem = base
        .checkpoint
        .file_stem()
        .map_or("model".to_string(), |s| s.to_string_lossy().into_owned());
    for cell in cells {
        for &variant in variants {
            for &seed in seeds {
                let start = Instant::now();
                let mut cfg = base.clone();
                cfg.variant = variant;
                cfg.seed = seed;
                cfg.checkpoint = base
                    .checkpoint
                    .with_file_name(format!("{stem}_{}_{variant}_{seed}.ckpt", cell.name));
                log(&format!("ablation cell {} / {variant} / seed {seed}", cell.name));
                let outcome = train_on(&cfg, cell.train.clone(), &cell.validation, log)?;
                let report = evaluate_nll(&outcome.model, &cell.test.series, cfg.k_test, seed ^ 0x7465_7374)?;
                log(&format!("  test nll {:.4} ± {:.4}", report.nll, report.se));
                table.push(MetricsRow {
                    dataset: cell.name.clone(),
                    variant: variant.to_string(),
                    seed: seed.to_string(),
                    nll: report.nll,
                    se: report.se,
                    wall_clock_s: start.elapsed().as_secs_f64(),
                    clip_rate: report.clip_rate,
                });
            }
        }
    }
    table.add_means();
    Ok(table)
}
