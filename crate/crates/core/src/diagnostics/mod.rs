//! Consistency diagnostics: conservation scatter data, signed relevance
//! histograms and conservative/positive/consistent verdicts over a sample
//! set.

mod method;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub use method::{Bound, Heatmapper, Method};

use crate::relevance::{Heatmap, RelevanceError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("invalid method {spec:?}: {reason}")]
    Method { spec: String, reason: String },
    #[error("the minmax method needs a trained min-max model")]
    MissingMinMax,
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Outputs below this count as zero: relative errors are not computed and
/// the heatmap must vanish instead.
pub const ZERO_OUTPUT: f64 = 1e-9;

pub const DEFAULT_HISTOGRAM_BINS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Largest relative conservation error of a conservative method.
    pub conservation: f64,
    /// Smallest pixel relevance of a positive method.
    pub positivity: f64,
    /// Largest aggregate gap ratio of a near-conservative method.
    pub near_conservation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            conservation: 1e-6,
            positivity: -1e-9,
            near_conservation: 0.1,
        }
    }
}

/// Per-sample outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    /// `f(x)`.
    pub output: f64,
    /// `Σ_p R_p`.
    pub total: f64,
    /// `|Σ_p R_p − f(x)| / f(x)`; `None` when `f(x)` is zero.
    pub relative_error: Option<f64>,
    pub min_relevance: f64,
    pub negative_mass: f64,
    pub positive_mass: f64,
    /// Whether a zero output came with an all-zero heatmap; `true` for
    /// nonzero outputs.
    pub zero_output_ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleFailure {
    pub index: usize,
    pub message: String,
}

/// Largest relative conservation gap seen at one layer boundary, bias
/// relevance included.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerGap {
    pub layer: usize,
    pub max_relative_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdicts {
    pub conservative: bool,
    pub positive: bool,
    /// Conservative and positive.
    pub consistent: bool,
    pub near_conservative: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub method: String,
    pub tolerances: Tolerances,
    pub records: Vec<SampleRecord>,
    pub failures: Vec<SampleFailure>,
    /// Mean and maximum of the relative errors over nonzero outputs.
    pub mean_relative_error: f64,
    pub max_relative_error: f64,
    /// `Σ_n |Σ_p R_p − f(x_n)| / Σ_n f(x_n)`.
    pub gap_ratio: f64,
    pub mean_output: f64,
    pub mean_total: f64,
    /// Share of the absolute relevance mass that is negative.
    pub negative_mass_fraction: f64,
    pub min_relevance: f64,
    pub layer_gaps: Vec<LayerGap>,
    pub verdicts: Verdicts,
    /// Every pixel relevance of every successful sample, in sample order.
    pub pixels: Vec<f64>,
}

fn record(index: usize, h: &Heatmap) -> SampleRecord {
    let f = h.output;
    let total = h.total();
    let mut negative_mass = 0.0;
    let mut positive_mass = 0.0;
    for &v in h.relevance.data() {
        if v < 0.0 {
            negative_mass -= v;
        } else {
            positive_mass += v;
        }
    }
    let zero = f.abs() < ZERO_OUTPUT;
    SampleRecord {
        index,
        output: f,
        total,
        relative_error: (!zero).then(|| (total - f).abs() / f.abs().max(ZERO_OUTPUT)),
        min_relevance: h.min(),
        negative_mass,
        positive_mass,
        zero_output_ok: !zero || h.relevance.max_abs() <= ZERO_OUTPUT,
    }
}

fn layer_gaps(heatmaps: &[(usize, Heatmap)]) -> Vec<LayerGap> {
    let mut gaps: BTreeMap<usize, f64> = BTreeMap::new();
    for (_, h) in heatmaps {
        let scale = h.output.abs().max(ZERO_OUTPUT);
        for s in &h.layer_sums {
            let gap = (s.relevance + s.bias - h.output).abs() / scale;
            let e = gaps.entry(s.layer).or_insert(0.0);
            *e = e.max(gap);
        }
    }
    gaps.into_iter()
        .rev()
        .map(|(layer, max_relative_gap)| LayerGap {
            layer,
            max_relative_gap,
        })
        .collect()
}

/// Runs `heatmapper` over `samples` in parallel and summarizes the
/// results. A failing sample is recorded and excluded from the statistics;
/// it also rules out the conservative verdict.
pub fn evaluate(heatmapper: &dyn Heatmapper, samples: &[Tensor], tolerances: Tolerances) -> Result<ConsistencyReport> {
    if samples.is_empty() {
        return Err(DiagnosticsError::NoSamples);
    }
    let outcomes: Vec<_> = samples.par_iter().map(|x| heatmapper.heatmap(x)).collect();
    let mut heatmaps = Vec::new();
    let mut failures = Vec::new();
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(h) => heatmaps.push((index, h)),
            Err(e) => failures.push(SampleFailure {
                index,
                message: e.to_string(),
            }),
        }
    }
    let records: Vec<SampleRecord> = heatmaps.iter().map(|(i, h)| record(*i, h)).collect();
    let errors: Vec<f64> = records.iter().filter_map(|r| r.relative_error).collect();
    let n = records.len().max(1) as f64;
    let mean = |it: &mut dyn Iterator<Item = f64>| it.sum::<f64>() / n;
    let mean_relative_error = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    let max_relative_error = errors.iter().copied().fold(0.0, f64::max);
    let output_sum: f64 = records.iter().map(|r| r.output.abs()).sum();
    let gap_sum: f64 = records.iter().map(|r| (r.total - r.output).abs()).sum();
    let gap_ratio = if output_sum > 0.0 {
        gap_sum / output_sum
    } else {
        gap_sum
    };
    let negative: f64 = records.iter().map(|r| r.negative_mass).sum();
    let positive: f64 = records.iter().map(|r| r.positive_mass).sum();
    let negative_mass_fraction = if negative + positive > 0.0 {
        negative / (negative + positive)
    } else {
        0.0
    };
    let min_relevance = records.iter().map(|r| r.min_relevance).fold(f64::INFINITY, f64::min);
    let min_relevance = if min_relevance.is_finite() { min_relevance } else { 0.0 };

    let complete = failures.is_empty();
    let conservative =
        complete && max_relative_error <= tolerances.conservation && records.iter().all(|r| r.zero_output_ok);
    let positive = complete && min_relevance >= tolerances.positivity;
    let verdicts = Verdicts {
        conservative,
        positive,
        consistent: conservative && positive,
        near_conservative: complete && gap_ratio <= tolerances.near_conservation,
    };

    Ok(ConsistencyReport {
        method: heatmapper.label(),
        tolerances,
        mean_relative_error,
        max_relative_error,
        gap_ratio,
        mean_output: mean(&mut records.iter().map(|r| r.output)),
        mean_total: mean(&mut records.iter().map(|r| r.total)),
        negative_mass_fraction,
        min_relevance,
        layer_gaps: layer_gaps(&heatmaps),
        verdicts,
        pixels: heatmaps
            .iter()
            .flat_map(|(_, h)| h.relevance.data().iter().copied())
            .collect(),
        records,
        failures,
    })
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|source| DiagnosticsError::Csv {
        path: path.into(),
        source,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |source| DiagnosticsError::Csv {
        path: path.into(),
        source,
    };
    let mut w = writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

/// Writes one `f_x,sum_r` row per successful sample.
pub fn export_scatter(report: &ConsistencyReport, path: &Path) -> Result<()> {
    write_rows(
        path,
        &["f_x", "sum_r"],
        report
            .records
            .iter()
            .map(|r| vec![r.output.to_string(), r.total.to_string()]),
    )
}

/// One histogram bin over relevance magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    /// Pixels with `R_p ≥ 0` and `|R_p|` in the bin.
    pub positive: u64,
    /// Pixels with `R_p < 0` and `|R_p|` in the bin.
    pub negative: u64,
}

/// Splits `[0, max |R_p|]` into `bins` equal bins and counts positive and
/// negative relevances by magnitude, so the two count columns mirror each
/// other around zero. Bins are half-open except the last; zeros count as
/// positive.
pub fn histogram(pixels: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(DiagnosticsError::NoBins);
    }
    if pixels.is_empty() {
        return Ok(Vec::new());
    }
    let top = pixels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let width = top / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            low: i as f64 * width,
            high: if i + 1 == bins { top } else { (i + 1) as f64 * width },
            positive: 0,
            negative: 0,
        })
        .collect();
    for &v in pixels {
        let i = if width > 0.0 {
            ((v.abs() / width) as usize).min(bins - 1)
        } else {
            0
        };
        if v < 0.0 {
            out[i].negative += 1;
        } else {
            out[i].positive += 1;
        }
    }
    Ok(out)
}

/// Writes `bin_low,bin_high,count_positive,count_negative` rows; an empty
/// report gives a header-only file.
pub fn export_histogram(report: &ConsistencyReport, path: &Path, bins: usize) -> Result<()> {
    let hist = histogram(&report.pixels, bins)?;
    write_rows(
        path,
        &["bin_low", "bin_high", "count_positive", "count_negative"],
        hist.iter().map(|b| {
            vec![
                b.low.to_string(),
                b.high.to_string(),
                b.positive.to_string(),
                b.negative.to_string(),
            ]
        }),
    )
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "method",
    "samples",
    "failures",
    "mean_relative_error",
    "max_relative_error",
    "gap_ratio",
    "mean_f_x",
    "mean_sum_r",
    "negative_mass_fraction",
    "min_relevance",
    "conservative",
    "positive",
    "consistent",
    "near_conservative",
];

impl ConsistencyReport {
    /// Fields in [`SUMMARY_HEADER`] order.
    pub fn summary_row(&self) -> [String; 14] {
        let v = &self.verdicts;
        [
            self.method.clone(),
            (self.records.len() + self.failures.len()).to_string(),
            self.failures.len().to_string(),
            format!("{:.3e}", self.mean_relative_error),
            format!("{:.3e}", self.max_relative_error),
            format!("{:.3e}", self.gap_ratio),
            format!("{:.6}", self.mean_output),
            format!("{:.6}", self.mean_total),
            format!("{:.3e}", self.negative_mass_fraction),
            format!("{:.3e}", self.min_relevance),
            yes_no(v.conservative),
            yes_no(v.positive),
            yes_no(v.consistent),
            yes_no(v.near_conservative),
        ]
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.into()
}

/// Writes one [`SUMMARY_HEADER`] row per report.
pub fn export_summary(reports: &[ConsistencyReport], path: &Path) -> Result<()> {
    write_rows(path, &SUMMARY_HEADER, reports.iter().map(|r| r.summary_row().to_vec()))
}

/// Fixed-width verdict table for terminals.
pub fn verdict_table(reports: &[ConsistencyReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>10}  {:>10}  {:>12}  {:>12}  {:>10}\n",
        "method", "gap ratio", "max error", "conservative", "positive", "consistent"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>10.3e}  {:>10.3e}  {:>12}  {:>12}  {:>10}\n",
            r.method,
            r.gap_ratio,
            r.max_relative_error,
            yes_no(r.verdicts.conservative),
            yes_no(r.verdicts.positive),
            yes_no(r.verdicts.consistent),
        ));
    }
    out
}
