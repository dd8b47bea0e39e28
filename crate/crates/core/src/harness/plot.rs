//! Tidy CSV plot data from a results store.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::matrix::{cell_name, Family, MatrixConfig, ResultRow, ResultStore};
use super::{MetricsReport, Stat};
use crate::error::{Error, Result};

pub const FIGURES: [&str; 4] = ["ma", "advantage", "data", "control"];

pub const CSV_HEADER: &str = "figure,cell,metric,mean,se,n";

type Metric = (&'static str, fn(&MetricsReport) -> Option<f64>);

const METRICS: [Metric; 4] = [
    ("sr", |m| Some(m.sr)),
    ("tp", |m| Some(m.tp)),
    ("retry", |m| Some(m.retry_cost)),
    ("score", |m| Some(m.score)),
];

const JERK: Metric = ("boundary_jerk", |m| m.boundary_jerk);

/// Cells a figure needs, in plotting order: those of the default matrix.
pub fn figure_cells(figure: &str) -> Result<Vec<String>> {
    figure_cells_in(&MatrixConfig::default(), figure)
}

/// Cells a figure needs under `cfg`.
pub fn figure_cells_in(cfg: &MatrixConfig, figure: &str) -> Result<Vec<String>> {
    let fam = cfg
        .families
        .iter()
        .find(|f| f.name() == figure)
        .ok_or_else(|| Error::Config(format!("unknown figure `{figure}` (expected one of {FIGURES:?})")))?;
    Ok(fam.axes().iter().map(|a| cell_name(fam.name(), a)).collect())
}

fn metrics_for(figure: &str) -> Vec<Metric> {
    let mut m = METRICS.to_vec();
    if figure == "control" {
        m.push(JERK);
    }
    m
}

/// Aggregates rows across seeds: one CSV row per (cell, metric).
pub fn plotdata_from_rows(rows: &[ResultRow], figure: &str) -> Result<String> {
    plotdata_with(rows, figure, &MatrixConfig::default())
}

/// As [`plotdata_from_rows`], for the cells of `cfg`.
pub fn plotdata_with(rows: &[ResultRow], figure: &str, cfg: &MatrixConfig) -> Result<String> {
    let cells = figure_cells_in(cfg, figure)?;
    let mut by_cell: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.family == figure) {
        by_cell.entry(r.cell.as_str()).or_default().push(r);
    }
    let missing: Vec<String> = cells
        .iter()
        .filter(|c| !by_cell.contains_key(c.as_str()))
        .map(|c| format!("{figure}/{c}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for cell in &cells {
        let mut rs = by_cell[cell.as_str()].clone();
        rs.sort_by_key(|r| r.seed);
        for (name, get) in metrics_for(figure) {
            let xs: Vec<f64> = rs.iter().filter_map(|r| get(&r.metrics)).collect();
            let s = Stat::of(&xs);
            writeln!(out, "{figure},{cell},{name},{},{},{}", s.mean, s.se, xs.len()).expect("string write");
        }
    }
    Ok(out)
}

pub fn emit_plotdata(store: &ResultStore, figure: &str) -> Result<String> {
    plotdata_from_rows(&store.rows()?, figure)
}

/// Families in the default matrix, for callers that enumerate figures.
pub fn default_families() -> Vec<Family> {
    MatrixConfig::default().families
}
