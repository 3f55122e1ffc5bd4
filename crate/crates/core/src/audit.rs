//! Spurious-region audit: run perturbation sweeps over correctly classified
//! source images, locate the lowest-certainty cell, summarize certainty
//! changes and write curves, plots and a summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::dataset::{class_subset_indices, DatasetError, DatasetSplit, GrayImage, NUM_CLASSES, SHIRT, SNEAKER};
use crate::model::{predict, ModelError, ParameterSet};
use crate::perturb::{stable_mean, sweep, GridSpec, PerturbError, PerturbationCurve};
use crate::seed::derive_seed;
use crate::train::{accuracy, TrainError};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class {0} out of range")]
    Class(usize),
    #[error("no correctly classified images of class {0} to audit")]
    NoSources(usize),
    #[error("no curves to summarize")]
    NoCurves,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditConfig {
    pub source_class: usize,
    pub target_class: usize,
    pub n_targets: usize,
    pub mc_passes: usize,
    pub seed: u64,
    /// Number of source images swept (metrics use all of them).
    pub n_sources: usize,
    /// Number of leading curves that get a plot.
    pub plot_sources: usize,
    pub per_target_appendix: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            source_class: SNEAKER,
            target_class: SHIRT,
            n_targets: 50,
            mc_passes: 100,
            seed: 0,
            n_sources: 20,
            plot_sources: 4,
            per_target_appendix: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    /// Mean over all (image, cell) of `|baseline - per_cell|`.
    pub mean_abs_change: f64,
    /// Mean over images of `max(0, baseline - min_cell per_cell)`.
    pub mean_max_drop: f64,
    /// Test accuracy of the audited model, when measured.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub model_id: String,
    pub config: AuditConfig,
    pub curves: Vec<PerturbationCurve>,
    pub target_indices: Vec<usize>,
    pub identified_cell_per_image: Vec<usize>,
    pub consensus_cell: usize,
    pub metrics: MetricSummary,
}

/// Cell with the lowest certainty (1-based, lowest index on ties).
pub fn identify_spurious(curve: &PerturbationCurve) -> usize {
    let mut best = 0;
    for (i, &v) in curve.per_cell.iter().enumerate() {
        if v < curve.per_cell[best] {
            best = i;
        }
    }
    best + 1
}

/// Most frequent cell, lowest cell on ties.
pub fn consensus_cell(cells: &[usize]) -> Option<usize> {
    let max = cells.iter().copied().max()?;
    let mut counts = vec![0usize; max + 1];
    for &c in cells {
        counts[c] += 1;
    }
    let mut best = cells.iter().copied().min()?;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Some(best)
}

/// Certainty drop at `cell` minus the median drop over all other cells.
pub fn cell_margin(curve: &PerturbationCurve, cell: usize) -> f64 {
    let drops = curve.drops();
    let mut others: Vec<f64> = drops
        .iter()
        .enumerate()
        .filter(|&(i, _)| i + 1 != cell)
        .map(|(_, &d)| d)
        .collect();
    others.sort_by(f64::total_cmp);
    let n = others.len();
    let median = if n % 2 == 1 {
        others[n / 2]
    } else {
        0.5 * (others[n / 2 - 1] + others[n / 2])
    };
    drops[cell - 1] - median
}

pub fn change_metrics(curves: &[PerturbationCurve]) -> Result<MetricSummary, AuditError> {
    if curves.is_empty() {
        return Err(AuditError::NoCurves);
    }
    let abs_changes: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.per_cell.iter().map(move |&v| (c.baseline.mean_prob - v).abs()))
        .collect();
    let max_drops: Vec<f64> = curves
        .iter()
        .map(|c| {
            let min = c.per_cell.iter().copied().fold(f64::INFINITY, f64::min);
            (c.baseline.mean_prob - min).max(0.0)
        })
        .collect();
    Ok(MetricSummary {
        mean_abs_change: stable_mean(&abs_changes),
        mean_max_drop: stable_mean(&max_drops),
        accuracy: None,
    })
}

/// Indices of `class` examples the model classifies correctly, dataset order.
pub fn correctly_classified(
    theta: &ParameterSet,
    split: &DatasetSplit,
    class: usize,
    limit: usize,
) -> Result<Vec<usize>, AuditError> {
    let mut out = Vec::new();
    for i in split.class_indices(class) {
        if out.len() == limit {
            break;
        }
        if predict(theta, &split.examples[i].image)? == class {
            out.push(i);
        }
    }
    Ok(out)
}

/// Full audit of `theta` on `split` (normally the decoyed test split).
pub fn run_audit(
    theta: &ParameterSet,
    split: &DatasetSplit,
    cfg: &AuditConfig,
    model_id: &str,
) -> Result<AuditReport, AuditError> {
    run_audit_with_progress(theta, split, cfg, model_id, |_, _| {})
}

pub fn run_audit_with_progress(
    theta: &ParameterSet,
    split: &DatasetSplit,
    cfg: &AuditConfig,
    model_id: &str,
    mut progress: impl FnMut(usize, &PerturbationCurve),
) -> Result<AuditReport, AuditError> {
    for class in [cfg.source_class, cfg.target_class] {
        if class >= NUM_CLASSES {
            return Err(AuditError::Class(class));
        }
    }
    let grid = GridSpec::new(theta.side(), 4)?;
    let sources = correctly_classified(theta, split, cfg.source_class, cfg.n_sources)?;
    if sources.is_empty() {
        return Err(AuditError::NoSources(cfg.source_class));
    }
    let target_indices = class_subset_indices(split, cfg.target_class, cfg.n_targets, derive_seed(cfg.seed, &[0]))?;
    let targets: Vec<GrayImage> = target_indices
        .iter()
        .map(|&i| split.examples[i].image.clone())
        .collect();
    let mut curves = Vec::with_capacity(sources.len());
    for (n, &src) in sources.iter().enumerate() {
        let curve = sweep(
            theta,
            src,
            &split.examples[src].image,
            cfg.source_class,
            &targets,
            &grid,
            cfg.mc_passes,
            derive_seed(cfg.seed, &[1, src as u64]),
        )?;
        progress(n, &curve);
        curves.push(curve);
    }
    let identified: Vec<usize> = curves.iter().map(identify_spurious).collect();
    let mut metrics = change_metrics(&curves)?;
    metrics.accuracy = Some(accuracy(theta, split)?);
    Ok(AuditReport {
        model_id: model_id.to_string(),
        config: cfg.clone(),
        consensus_cell: consensus_cell(&identified).expect("non-empty"),
        identified_cell_per_image: identified,
        curves,
        target_indices,
        metrics,
    })
}

pub fn curves_csv(curves: &[PerturbationCurve]) -> String {
    let mut out = String::from("source_index,cell,mean_certainty,baseline,n_targets,T\n");
    for c in curves {
        for (i, v) in c.per_cell.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{}",
                c.source_index,
                i + 1,
                v,
                c.baseline.mean_prob,
                c.n_targets,
                c.passes()
            );
        }
    }
    out
}

pub fn per_target_csv(curves: &[PerturbationCurve], target_indices: &[usize]) -> String {
    let mut out = String::from("source_index,cell,target_index,certainty\n");
    for c in curves {
        for (cell, row) in c.per_target.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{:.6}", c.source_index, cell + 1, target_indices[t], v);
            }
        }
    }
    out
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
pub const X_TICKS: [usize; 6] = [1, 10, 20, 30, 40, 49];

/// Line plot of one certainty curve: x = cell, y = mean certainty in [0, 1].
pub fn curve_svg(curve: &PerturbationCurve, title: &str) -> String {
    let cells = curve.per_cell.len().max(2);
    let x = |cell: usize| MARGIN_L + (cell - 1) as f64 / (cells - 1) as f64 * (PLOT_W - MARGIN_L - MARGIN_R);
    let y = |v: f64| MARGIN_T + (1.0 - v.clamp(0.0, 1.0)) * (PLOT_H - MARGIN_T - MARGIN_B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{PLOT_W}" height="{PLOT_H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{title}</text>"#,
        PLOT_W / 2.0
    );
    let (x0, x1, y0, y1) = (MARGIN_L, PLOT_W - MARGIN_R, y(0.0), y(1.0));
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2} {y1:.2} L{x0:.2} {y0:.2} L{x1:.2} {y0:.2}" fill="none" stroke="black"/>"#
    );
    for &t in &X_TICKS {
        if t > curve.per_cell.len() {
            continue;
        }
        let xt = x(t);
        let _ = writeln!(
            s,
            r#"<line x1="{xt:.2}" y1="{y0:.2}" x2="{xt:.2}" y2="{:.2}" stroke="black"/><text x="{xt:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            y0 + 5.0,
            y0 + 18.0
        );
    }
    for i in 0..=4 {
        let v = i as f64 * 0.25;
        let yt = y(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{yt:.2}" x2="{x0:.2}" y2="{yt:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            yt + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">perturbation cell</text>"#,
        (x0 + x1) / 2.0,
        PLOT_H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">mean MC dropout certainty</text>"#,
        (y0 + y1) / 2.0
    );
    let yb = y(curve.baseline.mean_prob);
    let _ = writeln!(
        s,
        r##"<line x1="{x0:.2}" y1="{yb:.2}" x2="{x1:.2}" y2="{yb:.2}" stroke="#888888" stroke-dasharray="4 4"/>"##
    );
    let points: Vec<String> = curve
        .per_cell
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.2},{:.2}", x(i + 1), y(v)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    let low = identify_spurious(curve);
    let _ = writeln!(
        s,
        r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#d62728"/>"##,
        x(low),
        y(curve.per_cell[low - 1])
    );
    s.push_str("</svg>\n");
    s
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn summary_key_values(report: &AuditReport) -> KeyValues {
    let c = &report.config;
    let mut kv = KeyValues::default();
    kv.insert("model_id", &report.model_id);
    kv.insert("source_class", c.source_class);
    kv.insert("target_class", c.target_class);
    kv.insert("n_targets", c.n_targets);
    kv.insert("mc_passes", c.mc_passes);
    kv.insert("seed", c.seed);
    kv.insert("n_sources", report.curves.len());
    kv.insert(
        "source_indices",
        report
            .curves
            .iter()
            .map(|c| c.source_index.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv.insert(
        "identified_cells",
        report
            .identified_cell_per_image
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    kv.insert("consensus_cell", report.consensus_cell);
    kv.insert("mean_abs_change", fmt4(report.metrics.mean_abs_change));
    kv.insert("mean_max_drop", fmt4(report.metrics.mean_max_drop));
    if let Some(acc) = report.metrics.accuracy {
        kv.insert("accuracy", fmt4(acc));
    }
    kv
}

fn write(path: &Path, contents: &str) -> Result<(), AuditError> {
    fs::write(path, contents).map_err(|source| AuditError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `curves.csv`, one `plot_<source>.svg` per plotted curve and
/// `summary.txt` (plus `per_target.csv` when requested). Returns the paths.
pub fn emit_report(report: &AuditReport, out_dir: &Path) -> Result<Vec<PathBuf>, AuditError> {
    fs::create_dir_all(out_dir).map_err(|source| AuditError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let curves_path = out_dir.join("curves.csv");
    write(&curves_path, &curves_csv(&report.curves))?;
    written.push(curves_path);
    for curve in report.curves.iter().take(report.config.plot_sources) {
        let path = out_dir.join(format!("plot_{}.svg", curve.source_index));
        let title = format!(
            "source image {} (class {}) vs {} targets of class {}",
            curve.source_index, report.config.source_class, curve.n_targets, report.config.target_class
        );
        write(&path, &curve_svg(curve, &title))?;
        written.push(path);
    }
    if report.config.per_target_appendix {
        let path = out_dir.join("per_target.csv");
        write(&path, &per_target_csv(&report.curves, &report.target_indices))?;
        written.push(path);
    }
    let summary = out_dir.join("summary.txt");
    write(&summary, &summary_key_values(report).render())?;
    written.push(summary);
    Ok(written)
}

/// Before/after comparison of two audit summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<(String, f64, f64)>,
}

impl Comparison {
    pub fn from_summaries(a: &KeyValues, b: &KeyValues) -> Result<Self, AuditError> {
        let mut rows = Vec::new();
        for key in ["mean_abs_change", "mean_max_drop", "accuracy"] {
            if let (Some(x), Some(y)) = (a.parsed::<f64>(key)?, b.parsed::<f64>(key)?) {
                rows.push((key.to_string(), x, y));
            }
        }
        Ok(Self {
            model_a: a.get("model_id").unwrap_or("?").to_string(),
            model_b: b.get("model_id").unwrap_or("?").to_string(),
            rows,
        })
    }

    pub fn render(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("model_a", &self.model_a);
        kv.insert("model_b", &self.model_b);
        for (key, a, b) in &self.rows {
            kv.insert(format!("{key}.a"), fmt4(*a));
            kv.insert(format!("{key}.b"), fmt4(*b));
            kv.insert(format!("{key}.delta"), fmt4(b - a));
            if *a != 0.0 {
                kv.insert(format!("{key}.ratio"), fmt4(b / a));
            }
        }
        kv.render()
    }
}
