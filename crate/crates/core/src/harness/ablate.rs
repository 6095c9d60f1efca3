//! The grounding ablation grid over contrastive loss and decoder conditioning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::slotattn::InitMode;
use crate::synthscene::Sample;

use super::config::RunConfig;
use super::eval::evaluate;
use super::train::{train, Experiment, TrainOptions};

/// Switch keys an ablation row may change.
pub const SWITCH_KEYS: [&str; 4] = [
    "contrastive_loss",
    "decoder_conditioning",
    "slot_init",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Whether the row appears in the reference ablation table.
    pub reference_row: bool,
    pub slot_init: InitMode,
    pub contrastive_loss: bool,
    pub decoder_conditioning: bool,
}

impl AblationRow {
    fn new(name: &str, reference_row: bool, slot_init: InitMode, cl: bool, dc: bool) -> Self {
        AblationRow {
            name: name.into(),
            reference_row,
            slot_init,
            contrastive_loss: cl,
            decoder_conditioning: dc,
        }
    }

    /// `base` with this row's switches and the given seed.
    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.slot_init = self.slot_init;
        c.contrastive_loss = self.contrastive_loss;
        c.decoder_conditioning = self.decoder_conditioning;
        c.seed = seed;
        c
    }
}

/// Rows in reference order: init only, +DC, +CL, +CL+DC; optionally followed
/// by the extra row with conditioned initialization off.
pub fn ablation_rows(base: &RunConfig) -> Vec<AblationRow> {
    let mut rows = vec![
        AblationRow::new("slot init", true, InitMode::Assign, false, false),
        AblationRow::new("slot init + DC", true, InitMode::Assign, false, true),
        AblationRow::new("slot init + CL", true, InitMode::Assign, true, false),
        AblationRow::new("slot init + CL + DC", true, InitMode::Assign, true, true),
    ];
    if base.ablation_init_off_row {
        rows.push(AblationRow::new(
            "no slot init + CL + DC (extra)",
            false,
            InitMode::None,
            true,
            true,
        ));
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub final_contrastive: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub binding_hits: f64,
    pub random_binding_hits: f64,
    pub fg_ari: f64,
    pub mbo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub cells: Vec<AblationCell>,
    /// Seed means over successful cells.
    pub summary: Option<RowSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationResult>,
    pub complete: bool,
}

fn summarize(cells: &[AblationCell]) -> Option<RowSummary> {
    let reports: Vec<&MetricsReport> = cells.iter().filter_map(|c| c.report.as_ref()).collect();
    if reports.is_empty() {
        return None;
    }
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| {
        reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64
    };
    Some(RowSummary {
        binding_hits: mean(&|r| r.binding_hits),
        random_binding_hits: mean(&|r| r.random_binding_hits),
        fg_ari: mean(&|r| r.fg_ari),
        mbo: mean(&|r| r.mbo),
    })
}

/// Trains and evaluates every row for `ablation_seeds` consecutive seeds
/// starting at `base.seed`. A failing cell is recorded and the table marked
/// incomplete; the remaining cells still run.
pub fn ablate(
    base: &RunConfig,
    data: Option<&[Sample]>,
    out_dir: Option<&Path>,
    workers: usize,
    mut progress: impl FnMut(&AblationRow, &AblationCell),
) -> Result<AblationTable> {
    base.validate()?;
    let rows = ablation_rows(base);
    let seeds: Vec<u64> = (0..base.ablation_seeds as u64)
        .map(|i| base.seed + i)
        .collect();
    let mut complete = true;
    let mut results = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let cfg = row.apply(base, seed);
            let changed = base.diff(&cfg);
            if let Some(k) = changed.iter().find(|k| !SWITCH_KEYS.contains(&k.as_str())) {
                return Err(Error::contract(format!(
                    "ablation row {} changed non-switch key {k}",
                    row.name
                )));
            }
            let cell_dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("row{r}_seed{seed}")));
            let outcome = (|| -> Result<(MetricsReport, Option<f64>)> {
                let exp = Experiment::new(cfg.clone(), data.map(<[Sample]>::to_vec))?;
                let opts = TrainOptions {
                    out_dir: cell_dir.clone(),
                    workers,
                    ..TrainOptions::default()
                };
                let run = train(&exp, &opts)?;
                let eval = match data {
                    Some(d) => d.to_vec(),
                    None => exp.eval_samples()?,
                };
                let (report, _) = evaluate(&run.model, &exp, &eval)?;
                let tail = run.log.steps.len().min(100);
                let contrastive = run.log.steps[run.log.steps.len() - tail..]
                    .iter()
                    .map(|s| s.contrastive)
                    .collect::<Option<Vec<f64>>>()
                    .filter(|v| !v.is_empty())
                    .map(|v| v.iter().sum::<f64>() / v.len() as f64);
                Ok((report, contrastive))
            })();
            let cell = match outcome {
                Ok((report, final_contrastive)) => AblationCell {
                    seed,
                    report: Some(report),
                    final_contrastive,
                    error: None,
                },
                Err(e) => {
                    complete = false;
                    AblationCell {
                        seed,
                        report: None,
                        final_contrastive: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            progress(row, &cell);
            cells.push(cell);
        }
        let summary = summarize(&cells);
        results.push(AblationResult {
            row: row.clone(),
            cells,
            summary,
        });
    }
    Ok(AblationTable {
        rows: results,
        complete,
    })
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no"
    }
}

/// Plain-text table, one line per row.
pub fn table_text(table: &AblationTable) -> String {
    let mut s = String::from("slot_init  CL   DC   binding_hits  random_bh  fg_ari  mbo     row\n");
    for r in &table.rows {
        let cols = match &r.summary {
            Some(m) => format!(
                "{:<12.4}  {:<9.4}  {:<6.4}  {:<6.4}",
                m.binding_hits, m.random_binding_hits, m.fg_ari, m.mbo
            ),
            None => format!("{:<12}  {:<9}  {:<6}  {:<6}", "failed", "-", "-", "-"),
        };
        s.push_str(&format!(
            "{:<9}  {:<3}  {:<3}  {cols}  {}\n",
            r.row.slot_init.to_string(),
            mark(r.row.contrastive_loss),
            mark(r.row.decoder_conditioning),
            r.row.name
        ));
    }
    if !table.complete {
        s.push_str("INCOMPLETE: some cells failed, see the JSON table for errors\n");
    }
    s
}
