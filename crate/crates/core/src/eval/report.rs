//! Per-utterance metric tables, their aggregates, and CSV/JSON/SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    /// Noise kinds joined with `+`.
    pub noise_kind: String,
    /// Absent for fixed-coefficient mixtures.
    pub snr_db: Option<f64>,
    pub stoi: f64,
    pub si_sdr: f64,
    pub stoi_noisy: f64,
    pub si_sdr_noisy: f64,
    pub pesq: Option<f64>,
    pub flops: u64,
    pub rtf: f64,
    pub nonlocal_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

impl Failure {
    pub fn new(id: &str, e: &Error) -> Self {
        Failure {
            id: id.to_string(),
            error: e.to_string(),
        }
    }
}

/// Means over a set of utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub stoi: f64,
    pub si_sdr: f64,
    pub stoi_noisy: f64,
    pub si_sdr_noisy: f64,
    /// Mean over the utterances that have a score.
    pub pesq: Option<f64>,
    pub pesq_count: usize,
    pub flops: f64,
    pub rtf: f64,
    pub nonlocal_fraction: f64,
}

impl Aggregate {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a UtteranceMetrics>) -> Self {
        let rows: Vec<&UtteranceMetrics> = rows.into_iter().collect();
        let n = rows.len();
        let mean = |f: &dyn Fn(&UtteranceMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        let pesq: Vec<f64> = rows.iter().filter_map(|r| r.pesq).collect();
        Aggregate {
            count: n,
            stoi: mean(&|r| r.stoi),
            si_sdr: mean(&|r| r.si_sdr),
            stoi_noisy: mean(&|r| r.stoi_noisy),
            si_sdr_noisy: mean(&|r| r.si_sdr_noisy),
            pesq: (!pesq.is_empty()).then(|| pesq.iter().sum::<f64>() / pesq.len() as f64),
            pesq_count: pesq.len(),
            flops: mean(&|r| r.flops as f64),
            rtf: mean(&|r| r.rtf),
            nonlocal_fraction: mean(&|r| r.nonlocal_fraction),
        }
    }
}

/// One (noise kind, SNR) cell of the summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub noise_kind: String,
    pub snr_db: Option<f64>,
    #[serde(flatten)]
    pub metrics: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub overall: Aggregate,
    pub conditions: Vec<Condition>,
    pub failures: Vec<Failure>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<UtteranceMetrics>,
    pub failures: Vec<Failure>,
}

/// Total order on optional SNRs for grouping; `None` sorts last.
fn snr_key(s: Option<f64>) -> (bool, i64) {
    match s {
        Some(v) => (false, (v * 1000.0).round() as i64),
        None => (true, 0),
    }
}

/// A metric that can be plotted against SNR.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotMetric {
    Stoi,
    SiSdr,
    Pesq,
}

impl PlotMetric {
    fn name(self) -> &'static str {
        match self {
            PlotMetric::Stoi => "stoi",
            PlotMetric::SiSdr => "si_sdr",
            PlotMetric::Pesq => "pesq",
        }
    }

    fn label(self) -> &'static str {
        match self {
            PlotMetric::Stoi => "STOI",
            PlotMetric::SiSdr => "SI-SDR (dB)",
            PlotMetric::Pesq => "PESQ",
        }
    }

    fn enhanced(self, a: &Aggregate) -> Option<f64> {
        match self {
            PlotMetric::Stoi => Some(a.stoi),
            PlotMetric::SiSdr => Some(a.si_sdr),
            PlotMetric::Pesq => a.pesq,
        }
    }

    fn noisy(self, a: &Aggregate) -> Option<f64> {
        match self {
            PlotMetric::Stoi => Some(a.stoi_noisy),
            PlotMetric::SiSdr => Some(a.si_sdr_noisy),
            PlotMetric::Pesq => None,
        }
    }
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl MetricReport {
    pub fn aggregate(&self) -> Aggregate {
        Aggregate::of(&self.rows)
    }

    /// Aggregates per (noise kind, SNR), sorted by kind then SNR.
    pub fn conditions(&self) -> Vec<Condition> {
        let mut groups: BTreeMap<(String, (bool, i64)), (Option<f64>, Vec<&UtteranceMetrics>)> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.noise_kind.clone(), snr_key(r.snr_db)))
                .or_insert_with(|| (r.snr_db, Vec::new()))
                .1
                .push(r);
        }
        groups
            .into_iter()
            .map(|((noise_kind, _), (snr_db, rows))| Condition {
                noise_kind,
                snr_db,
                metrics: Aggregate::of(rows),
            })
            .collect()
    }

    pub fn summary(&self) -> Summary {
        Summary {
            overall: self.aggregate(),
            conditions: self.conditions(),
            failures: self.failures.clone(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "id",
            "noise_kind",
            "snr_db",
            "stoi",
            "si_sdr",
            "stoi_noisy",
            "si_sdr_noisy",
            "pesq",
            "flops",
            "rtf",
            "nonlocal_fraction",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.noise_kind.clone(),
                opt(r.snr_db),
                r.stoi.to_string(),
                r.si_sdr.to_string(),
                r.stoi_noisy.to_string(),
                r.si_sdr_noisy.to_string(),
                opt(r.pesq),
                r.flops.to_string(),
                r.rtf.to_string(),
                r.nonlocal_fraction.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }

    /// Metric-vs-SNR curves, one line per noise kind; dashed lines show
    /// the unprocessed mixture. `None` when nothing is plottable.
    pub fn svg_plot(&self, metric: PlotMetric) -> Option<String> {
        let mut series: BTreeMap<String, Vec<(f64, Option<f64>, Option<f64>)>> = BTreeMap::new();
        for c in self.conditions() {
            if let Some(snr) = c.snr_db {
                series.entry(c.noise_kind.clone()).or_default().push((
                    snr,
                    metric.enhanced(&c.metrics),
                    metric.noisy(&c.metrics),
                ));
            }
        }
        let points: Vec<(f64, f64)> = series
            .values()
            .flatten()
            .flat_map(|&(x, a, b)| [a.map(|y| (x, y)), b.map(|y| (x, y))])
            .flatten()
            .filter(|(_, y)| y.is_finite())
            .collect();
        if points.is_empty() {
            return None;
        }
        let (w, h) = (640.0, 420.0);
        let (left, right, top, bottom) = (70.0, 170.0, 30.0, 50.0);
        let (pw, ph) = (w - left - right, h - top - bottom);
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| {
            points.iter().map(sel).fold(init, f)
        };
        let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
        let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
        if x1 - x0 < 1e-9 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        let pad = ((y1 - y0) * 0.08).max(1e-3);
        y0 -= pad;
        y1 += pad;
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for x in &xs {
            let px = sx(*x);
            let _ = writeln!(
                s,
                r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
                top + ph,
                top + ph + 5.0,
                top + ph + 20.0
            );
        }
        for k in 0..=4 {
            let y = y0 + (y1 - y0) * k as f64 / 4.0;
            let py = sy(y);
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{py:.1}" x2="{left}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"#,
                left - 5.0,
                left - 8.0,
                py + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">SNR (dB)</text>"#,
            left + pw / 2.0,
            h - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            metric.label()
        );
        let mut legend = 0;
        for (i, (kind, pts)) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            for (noisy, dash) in [(false, ""), (true, r#" stroke-dasharray="5,4""#)] {
                let line: Vec<String> = pts
                    .iter()
                    .filter_map(|&(x, a, b)| if noisy { b } else { a }.filter(|y| y.is_finite()).map(|y| (x, y)))
                    .map(|(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                    .collect();
                if line.is_empty() {
                    continue;
                }
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                    line.join(" ")
                );
                for p in &line {
                    let (cx, cy) = p.split_once(',').expect("formatted above");
                    let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
                }
                let ly = top + 10.0 + 18.0 * legend as f64;
                let lx = left + pw + 12.0;
                let name = if noisy { format!("{kind} (noisy)") } else { kind.clone() };
                let _ = writeln!(
                    s,
                    r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
                    lx + 24.0,
                    lx + 30.0,
                    ly + 4.0,
                    escape_xml(&name)
                );
                legend += 1;
            }
        }
        s.push_str("</svg>\n");
        Some(s)
    }

    /// Writes `metrics.csv`, `summary.json` and the available
    /// `<metric>_vs_snr.svg` plots into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![(dir.join("metrics.csv"), self.to_csv()?), (dir.join("summary.json"), self.summary_json()?)];
        for m in [PlotMetric::Stoi, PlotMetric::SiSdr, PlotMetric::Pesq] {
            if let Some(svg) = self.svg_plot(m) {
                files.push((dir.join(format!("{}_vs_snr.svg", m.name())), svg));
            }
        }
        for (path, text) in &files {
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
