//! Deterministic SVG output. Numbers are written with fixed precision so
//! identical inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DetectionReport;
use crate::scoring::{Origin, ScoreTable, Scorer};

const PANEL: f64 = 220.0;
const MARGIN: f64 = 30.0;
const LIGHT: f64 = 88.0;
const DARK: f64 = 28.0;

pub const DENSITY_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointTag {
    Id,
    CoarseOod,
    FineOod,
    Outlier,
    Mixed,
}

impl PointTag {
    pub const ALL: [PointTag; 5] = [
        PointTag::Id,
        PointTag::CoarseOod,
        PointTag::FineOod,
        PointTag::Outlier,
        PointTag::Mixed,
    ];

    fn title(&self) -> &'static str {
        match self {
            PointTag::Id => "(a) ID",
            PointTag::CoarseOod => "(b) coarse OOD",
            PointTag::FineOod => "(c) fine OOD",
            PointTag::Outlier => "(d) outliers",
            PointTag::Mixed => "(e) mixed",
        }
    }

    fn hue(&self) -> u32 {
        match self {
            PointTag::Id => 210,
            PointTag::CoarseOod => 30,
            PointTag::FineOod => 0,
            PointTag::Outlier => 120,
            PointTag::Mixed => 280,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggedPoint {
    pub x: f64,
    pub y: f64,
    pub tag: PointTag,
    /// Confidence in [0, 1] used for shading; darker is more confident.
    pub confidence: Option<f64>,
}

/// HSL lightness (percent) for a confidence value.
pub fn lightness(confidence: f64) -> f64 {
    let c = confidence.clamp(0.0, 1.0);
    LIGHT + (DARK - LIGHT) * c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureEntry {
    pub kind: String,
    pub path: PathBuf,
    pub inputs: Vec<String>,
    pub parameters: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FigureManifest {
    pub figures: Vec<FigureEntry>,
}

impl FigureManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn write_file(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn header(out: &mut String, width: f64, height: f64, metadata: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<metadata>{metadata}</metadata>");
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Bounds {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Bounds {
    fn of(points: &[TaggedPoint]) -> Self {
        if points.is_empty() {
            return Self {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            };
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let pad = |a: f64, b: f64| if b - a < 1e-12 { 0.5 } else { 0.05 * (b - a) };
        let (px, py) = (pad(x0, x1), pad(y0, y1));
        Self {
            x0: x0 - px,
            x1: x1 + px,
            y0: y0 - py,
            y1: y1 + py,
        }
    }

    fn map(&self, x: f64, y: f64, ox: f64, oy: f64) -> (f64, f64) {
        (
            ox + (x - self.x0) / (self.x1 - self.x0) * PANEL,
            oy + PANEL - (y - self.y0) / (self.y1 - self.y0) * PANEL,
        )
    }
}

/// One panel per tag present (canonical order), ID points drawn faintly
/// behind the others. An empty point set gives a single empty axes.
pub fn emit_scatter(points: &[TaggedPoint], out_path: &Path) -> Result<FigureEntry> {
    let tags: Vec<PointTag> = PointTag::ALL
        .into_iter()
        .filter(|t| points.iter().any(|p| p.tag == *t))
        .collect();
    let n_panels = tags.len().max(1);
    let width = n_panels as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 2.0 * MARGIN;
    let bounds = Bounds::of(points);
    let mut svg = String::new();
    header(
        &mut svg,
        width,
        height,
        &format!("scatter panels={n_panels} points={}", points.len()),
    );

    for slot in 0..n_panels {
        let ox = MARGIN + slot as f64 * (PANEL + MARGIN);
        let oy = MARGIN;
        let tag = tags.get(slot).copied();
        let title = tag.map_or("", |t| t.title());
        let _ = writeln!(
            svg,
            r#"<g class="panel" data-tag="{}"><rect x="{ox:.2}" y="{oy:.2}" width="{PANEL:.2}" height="{PANEL:.2}" fill="none" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{title}</text>"#,
            tag.map_or("none".to_string(), |t| format!("{t:?}").to_lowercase()),
            ox + PANEL / 2.0,
            oy - 8.0,
        );
        if let Some(tag) = tag {
            if tag != PointTag::Id {
                for p in points.iter().filter(|p| p.tag == PointTag::Id) {
                    let (cx, cy) = bounds.map(p.x, p.y, ox, oy);
                    let _ = writeln!(
                        svg,
                        r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.5" fill="hsl(0,0%,85%)"/>"#
                    );
                }
            }
            for p in points.iter().filter(|p| p.tag == tag) {
                let (cx, cy) = bounds.map(p.x, p.y, ox, oy);
                let l = p.confidence.map_or(50.0, lightness);
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2" fill="hsl({},70%,{l:.1}%)"/>"#,
                    tag.hue()
                );
            }
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    write_file(out_path, &svg)?;
    let mut parameters = BTreeMap::new();
    parameters.insert("panels".into(), n_panels.to_string());
    parameters.insert("lightness_range".into(), format!("{LIGHT}..{DARK}"));
    Ok(FigureEntry {
        kind: "scatter".into(),
        path: out_path.to_path_buf(),
        inputs: Vec::new(),
        parameters,
    })
}

/// Confidence scores of one model, drawn as one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPanel {
    pub name: String,
    pub table: ScoreTable,
}

/// Density-normalized histogram over `[0, 1]`; the top edge is inclusive.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    if scores.is_empty() {
        return counts;
    }
    for &s in scores {
        let idx = ((s.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        counts[idx] += 1.0;
    }
    let scale = bins as f64 / scores.len() as f64;
    counts.iter_mut().for_each(|c| *c *= scale);
    counts
}

/// Origin, bin centres and densities of one curve.
type Curve = (Origin, Vec<f64>, Vec<f64>);

/// Per-model panels of per-origin confidence histograms. An origin with a
/// single score is drawn as a vertical marker.
pub fn emit_confidence_density(panels: &[DensityPanel], out_path: &Path) -> Result<FigureEntry> {
    if panels.is_empty() {
        return Err(Error::invalid_arg("no score tables to plot"));
    }
    for p in panels {
        if p.table.scorer != Scorer::Msp {
            return Err(Error::invalid_arg(format!(
                "density panel {:?} holds {} scores, expected msp",
                p.name, p.table.scorer
            )));
        }
    }
    let width = panels.len() as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 3.0 * MARGIN;
    let mut svg = String::new();
    header(
        &mut svg,
        width,
        height,
        &format!("density bins={DENSITY_BINS} range=[0,1] normalization=density"),
    );
    let hists: Vec<Vec<Curve>> = panels
        .iter()
        .map(|p| {
            Origin::ALL
                .into_iter()
                .map(|o| {
                    let s = p.table.scores_for(o);
                    let h = histogram(&s, DENSITY_BINS);
                    (o, s, h)
                })
                .collect()
        })
        .collect();
    let y_max = hists
        .iter()
        .flatten()
        .flat_map(|(_, _, h)| h.iter().copied())
        .fold(1.0, f64::max);

    for (slot, (panel, origins)) in panels.iter().zip(&hists).enumerate() {
        let ox = MARGIN + slot as f64 * (PANEL + MARGIN);
        let oy = MARGIN;
        let _ = writeln!(
            svg,
            r#"<g class="panel" data-model="{}"><rect x="{ox:.2}" y="{oy:.2}" width="{PANEL:.2}" height="{PANEL:.2}" fill="none" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            escape(&panel.name),
            ox + PANEL / 2.0,
            oy - 8.0,
            escape(&panel.name)
        );
        for (origin, scores, hist) in origins {
            let colour = match origin {
                Origin::IdTest => "hsl(210,70%,45%)",
                Origin::FineOod => "hsl(0,70%,50%)",
                Origin::CoarseOod => "hsl(30,80%,50%)",
            };
            match scores.len() {
                0 => {}
                1 => {
                    let x = ox + scores[0].clamp(0.0, 1.0) * PANEL;
                    let _ = writeln!(
                        svg,
                        r#"<line class="marker" data-origin="{}" x1="{x:.2}" y1="{oy:.2}" x2="{x:.2}" y2="{:.2}" stroke="{colour}"/>"#,
                        origin.as_str(),
                        oy + PANEL
                    );
                }
                _ => {
                    let mut pts = String::new();
                    let w = PANEL / DENSITY_BINS as f64;
                    for (b, v) in hist.iter().enumerate() {
                        let y = oy + PANEL - v / y_max * PANEL;
                        let _ = write!(
                            pts,
                            "{:.2},{y:.2} {:.2},{y:.2} ",
                            ox + b as f64 * w,
                            ox + (b + 1) as f64 * w
                        );
                    }
                    let _ = writeln!(
                        svg,
                        r#"<polyline class="density" data-origin="{}" points="{}" fill="none" stroke="{colour}"/>"#,
                        origin.as_str(),
                        pts.trim_end()
                    );
                }
            }
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    write_file(out_path, &svg)?;
    let mut parameters = BTreeMap::new();
    parameters.insert("bins".into(), DENSITY_BINS.to_string());
    parameters.insert("range".into(), "[0,1]".into());
    Ok(FigureEntry {
        kind: "confidence_density".into(),
        path: out_path.to_path_buf(),
        inputs: panels.iter().map(|p| p.name.clone()).collect(),
        parameters,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Grouped TNR95 bars: coarse-grained OOD in the first row, fine-grained in
/// the second, one column per dataset. Reports of several splits are
/// averaged. The dashed line marks the standard model scored by MSP.
pub fn emit_tnr_bars(reports: &[DetectionReport], out_path: &Path) -> Result<FigureEntry> {
    if reports.is_empty() {
        return Err(Error::invalid_arg("no detection reports"));
    }
    let label = |r: &DetectionReport| {
        if r.scorer == Scorer::Msp {
            r.method.clone()
        } else {
            format!("{}+{}", r.method, r.scorer)
        }
    };
    let mut datasets: Vec<String> = reports.iter().map(|r| r.environment.dataset_name.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut methods: Vec<String> = Vec::new();
    for r in reports {
        let l = label(r);
        if !methods.contains(&l) {
            methods.push(l);
        }
    }

    let bar_w = 14.0;
    let col_w = (methods.len() as f64 * bar_w).max(PANEL * 0.5) + MARGIN;
    let width = datasets.len() as f64 * col_w + MARGIN;
    let height = 2.0 * (PANEL + MARGIN) + MARGIN;
    let mut svg = String::new();
    header(
        &mut svg,
        width,
        height,
        "tnr95 bars rows=coarse,fine baseline=standard/msp",
    );

    for (row, name) in [(0usize, "coarse"), (1, "fine")] {
        for (c, dataset) in datasets.iter().enumerate() {
            let ox = MARGIN + c as f64 * col_w;
            let oy = MARGIN + row as f64 * (PANEL + MARGIN);
            let _ = writeln!(
                svg,
                r#"<g class="cell" data-row="{name}" data-dataset="{}"><rect x="{ox:.2}" y="{oy:.2}" width="{:.2}" height="{PANEL:.2}" fill="none" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{} ({name})</text>"#,
                escape(dataset),
                col_w - MARGIN,
                ox + (col_w - MARGIN) / 2.0,
                oy - 8.0,
                escape(dataset)
            );
            let field = |r: &DetectionReport| if row == 0 { r.tnr95_coarse } else { r.tnr95_fine };
            let value_of = |method: &str| -> Option<f64> {
                let vals: Vec<f64> = reports
                    .iter()
                    .filter(|r| &r.environment.dataset_name == dataset && label(r) == method)
                    .filter_map(field)
                    .collect();
                mean(&vals)
            };
            for (m, method) in methods.iter().enumerate() {
                if let Some(v) = value_of(method) {
                    let h = v.clamp(0.0, 1.0) * PANEL;
                    let x = ox + 4.0 + m as f64 * bar_w;
                    let fill = if method == "standard" {
                        "hsl(0,0%,60%)"
                    } else {
                        "hsl(16,80%,62%)"
                    };
                    let _ = writeln!(
                        svg,
                        r#"<rect class="bar" data-method="{}" data-value="{v}" x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{fill}"/>"#,
                        escape(method),
                        oy + PANEL - h,
                        bar_w - 2.0
                    );
                }
            }
            if let Some(base) = value_of("standard") {
                let y = oy + PANEL - base.clamp(0.0, 1.0) * PANEL;
                let _ = writeln!(
                    svg,
                    r#"<line class="baseline" data-value="{base}" x1="{ox:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="4,3"/>"#,
                    ox + col_w - MARGIN
                );
            }
            svg.push_str("</g>\n");
        }
    }
    svg.push_str("</svg>\n");
    write_file(out_path, &svg)?;
    let mut parameters = BTreeMap::new();
    parameters.insert("rows".into(), "coarse,fine".into());
    parameters.insert("methods".into(), methods.join(","));
    Ok(FigureEntry {
        kind: "tnr_bars".into(),
        path: out_path.to_path_buf(),
        inputs: datasets,
        parameters,
    })
}
