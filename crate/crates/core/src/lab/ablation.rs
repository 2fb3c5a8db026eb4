//! The six component rows over a list of seeds.

use std::fmt::Write as _;

use crate::error::{LabError, Result};
use crate::lab::config::ExperimentConfig;
use crate::lab::experiment::{build_scene, run_in_scene, InitCache, Scene};

/// Component toggles of one table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub skeleton_condition: bool,
    pub shape_init: bool,
    pub chs_loss: bool,
}

const fn row(name: &'static str, skeleton_condition: bool, shape_init: bool, chs_loss: bool) -> AblationRow {
    AblationRow {
        name,
        skeleton_condition,
        shape_init,
        chs_loss,
    }
}

/// Table order: nothing, conditioning only, then the three two-component
/// rows, then everything.
pub const ROWS: [AblationRow; 6] = [
    row("none", false, false, false),
    row("condition", true, false, false),
    row("condition+shape", true, true, false),
    row("shape+chs", false, true, true),
    row("condition+chs", true, false, true),
    row("full", true, true, true),
];

pub const FULL: usize = 5;
pub const NONE: usize = 0;
/// Rows with exactly two components.
pub const PAIRS: [usize; 3] = [2, 3, 4];

impl AblationRow {
    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            skeleton_condition: self.skeleton_condition,
            shape_init: self.shape_init,
            chs_loss: self.chs_loss,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedResult {
    /// Index into [`ROWS`].
    pub row: usize,
    pub seed: u64,
    pub consistency: f64,
    pub final_chs: f64,
}

/// Runs one row for one seed.
pub fn run_row(base: &ExperimentConfig, scene: &Scene, cache: &InitCache, row: usize, seed: u64) -> Result<SeedResult> {
    let config = ROWS[row].apply(base, seed);
    let report = run_in_scene(&config, scene, Some(cache))?;
    Ok(SeedResult {
        row,
        seed,
        consistency: report.assignment.consistency,
        final_chs: report.final_chs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSummary {
    pub row: usize,
    pub n: usize,
    pub consistency_mean: f64,
    pub consistency_sd: f64,
    pub final_chs_mean: f64,
    pub final_chs_sd: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-row summaries in table order; rows without results are omitted.
pub fn summarize(results: &[SeedResult]) -> Vec<RowSummary> {
    (0..ROWS.len())
        .filter_map(|row| {
            let mine: Vec<&SeedResult> = results.iter().filter(|r| r.row == row).collect();
            if mine.is_empty() {
                return None;
            }
            let (cm, cs) = mean_sd(&mine.iter().map(|r| r.consistency).collect::<Vec<_>>());
            let (fm, fs) = mean_sd(&mine.iter().map(|r| r.final_chs).collect::<Vec<_>>());
            Some(RowSummary {
                row,
                n: mine.len(),
                consistency_mean: cm,
                consistency_sd: cs,
                final_chs_mean: fm,
                final_chs_sd: fs,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub results: Vec<SeedResult>,
    pub rows: Vec<RowSummary>,
}

impl AblationTable {
    pub fn from_results(results: Vec<SeedResult>) -> Self {
        let rows = summarize(&results);
        Self { results, rows }
    }

    pub fn row(&self, row: usize) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.row == row)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "row,skeleton_condition,shape_init,chs_loss,n,consistency_mean,consistency_sd,final_chs_mean,final_chs_sd\n",
        );
        for r in &self.rows {
            let spec = ROWS[r.row];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                spec.name,
                spec.skeleton_condition,
                spec.shape_init,
                spec.chs_loss,
                r.n,
                r.consistency_mean,
                r.consistency_sd,
                r.final_chs_mean,
                r.final_chs_sd
            );
        }
        out
    }

    pub fn seeds_csv(&self) -> String {
        let mut out = String::from("row,seed,consistency,final_chs\n");
        for r in &self.results {
            let _ = writeln!(out, "{},{},{},{}", ROWS[r.row].name, r.seed, r.consistency, r.final_chs);
        }
        out
    }
}

/// All six rows for every seed, row-major. `progress` sees each result as
/// it completes.
pub fn ablation_suite(
    base: &ExperimentConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&SeedResult),
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(LabError::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let scene = build_scene(base)?;
    let cache = InitCache::new();
    let mut results = Vec::with_capacity(ROWS.len() * seeds.len());
    for row in 0..ROWS.len() {
        for &seed in seeds {
            let r = run_row(base, &scene, &cache, row, seed)?;
            progress(&r);
            results.push(r);
        }
    }
    Ok(AblationTable::from_results(results))
}
