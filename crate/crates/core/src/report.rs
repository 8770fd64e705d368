//! Error metrics, per-parameter trajectories and plot rendering.
//!
//! MSE and MAE are sums over FOGI coordinates so they sit on the same axes
//! as `Tr(P)` and `Tr(sqrt P)`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterState;
use crate::gauge::FogiBasis;

/// Parameters whose trajectories are reported by default: the on-axis
/// over-rotations.
pub fn default_tracked_labels(n_qubits: usize) -> Vec<&'static str> {
    if n_qubits == 1 {
        vec!["Gx:H:X", "Gy:H:Y"]
    } else {
        vec!["Gcnot:H:ZX", "Gxi:H:XI"]
    }
}

/// A model parameter read off the FOGI vector as `w . x_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedParameter {
    pub label: String,
    pub weights: DVector<f64>,
}

impl TrackedParameter {
    pub fn new(fogi: &FogiBasis<f64>, label: &str) -> Result<Self> {
        let (weights, _) = fogi
            .functional(label)
            .ok_or_else(|| Error::invalid(format!("unknown parameter label {label:?}")))?;
        Ok(Self {
            label: label.to_string(),
            weights,
        })
    }

    pub fn value(&self, x_f: &DVector<f64>) -> f64 {
        self.weights.dot(x_f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackedEstimate {
    pub label: String,
    pub estimate: f64,
    pub sigma: f64,
}

/// Compact record of the filter state after one update (or `k = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub k: usize,
    pub circuit_id: String,
    pub depth: usize,
    pub x_hat: Vec<f64>,
    pub trace_p: f64,
    #[serde(rename = "trace_sqrtP")]
    pub trace_sqrt_p: f64,
    pub tracked: Vec<TrackedEstimate>,
}

impl Snapshot {
    pub fn capture(
        state: &FilterState<f64>,
        circuit_id: &str,
        depth: usize,
        trace_sqrt_p: f64,
        tracked: &[TrackedParameter],
    ) -> Self {
        let tracked = tracked
            .iter()
            .map(|t| TrackedEstimate {
                label: t.label.clone(),
                estimate: t.value(&state.x_hat),
                sigma: t.weights.dot(&(&state.p * &t.weights)).max(0.0).sqrt(),
            })
            .collect();
        Self {
            k: state.k,
            circuit_id: circuit_id.to_string(),
            depth,
            x_hat: state.x_hat.iter().copied().collect(),
            trace_p: state.p.trace(),
            trace_sqrt_p,
            tracked,
        }
    }

    pub fn write_line<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_all<R: BufRead>(input: R) -> Result<Vec<Self>> {
        input
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|(i, l)| serde_json::from_str(&l?).map_err(|e| Error::Parse(format!("snapshot line {}: {e}", i + 1))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub k: usize,
    pub circuit_id: String,
    pub depth: usize,
    /// `sum (x_hat - x)^2`; absent without a truth model.
    pub mse: Option<f64>,
    /// `sum |x_hat - x|`.
    pub mae: Option<f64>,
    pub trace_p: f64,
    pub trace_sqrt_p: f64,
    pub tracked: Vec<TrackedEstimate>,
}

pub fn compute_metrics(snapshots: &[Snapshot], x_true: Option<&DVector<f64>>) -> Result<Vec<MetricRow>> {
    snapshots
        .iter()
        .map(|s| {
            let errors = match x_true {
                Some(x) => {
                    if x.len() != s.x_hat.len() {
                        return Err(Error::invalid(format!(
                            "truth has {} FOGI coordinates, estimate has {}",
                            x.len(),
                            s.x_hat.len()
                        )));
                    }
                    let d: Vec<f64> = s.x_hat.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
                    Some((d.iter().map(|v| v * v).sum(), d.iter().map(|v| v.abs()).sum()))
                }
                None => None,
            };
            Ok(MetricRow {
                k: s.k,
                circuit_id: s.circuit_id.clone(),
                depth: s.depth,
                mse: errors.map(|e| e.0),
                mae: errors.map(|e| e.1),
                trace_p: s.trace_p,
                trace_sqrt_p: s.trace_sqrt_p,
                tracked: s.tracked.clone(),
            })
        })
        .collect()
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["k", "circuit_id", "depth", "mse", "mae", "trace_P", "trace_sqrtP"]
        .map(String::from)
        .to_vec();
    if let Some(first) = rows.first() {
        for t in &first.tracked {
            header.push(t.label.clone());
            header.push(format!("{}_sigma", t.label));
        }
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.k.to_string(),
            r.circuit_id.clone(),
            r.depth.to_string(),
            opt_num(r.mse),
            opt_num(r.mae),
            num(r.trace_p),
            num(r.trace_sqrt_p),
        ];
        for t in &r.tracked {
            rec.push(num(t.estimate));
            rec.push(num(t.sigma));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// File-name form of a parameter label.
pub fn label_slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn write_trajectory_csv<W: Write>(rows: &[MetricRow], index: usize, truth: Option<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "estimate", "sigma", "lower", "upper", "truth"])?;
    for r in rows {
        let t = r
            .tracked
            .get(index)
            .ok_or_else(|| Error::invalid(format!("row {} lacks tracked parameter {index}", r.k)))?;
        w.write_record([
            r.k.to_string(),
            num(t.estimate),
            num(t.sigma),
            num(t.estimate - t.sigma),
            num(t.estimate + t.sigma),
            opt_num(truth),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One batched-MLE estimate placed at its stream position.
#[derive(Clone, Debug, PartialEq)]
pub struct MleMarker {
    pub k: usize,
    pub x: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::invalid(format!("unknown report format {other:?}"))),
        }
    }
}

/// Everything `emit` renders.
pub struct ReportInput<'a> {
    pub rows: &'a [MetricRow],
    pub tracked: &'a [TrackedParameter],
    pub x_true: Option<&'a DVector<f64>>,
    pub mle: &'a [MleMarker],
}

/// Writes `metrics.csv` and one `trajectory_<param>.csv` per tracked
/// parameter, plus `plots/*.svg` for the SVG format. Returns the paths.
pub fn emit(input: &ReportInput<'_>, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    if input.rows.is_empty() {
        return Err(Error::invalid("no metric rows to report"));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let path = dir.join("metrics.csv");
    write_metrics_csv(input.rows, fs::File::create(&path)?)?;
    written.push(path);
    for (i, t) in input.tracked.iter().enumerate() {
        let path = dir.join(format!("trajectory_{}.csv", label_slug(&t.label)));
        let truth = input.x_true.map(|x| t.value(x));
        write_trajectory_csv(input.rows, i, truth, fs::File::create(&path)?)?;
        written.push(path);
    }
    if format == ReportFormat::Svg {
        let plots = dir.join("plots");
        fs::create_dir_all(&plots)?;
        let path = plots.join("errors.svg");
        fs::write(&path, error_plot(input))?;
        written.push(path);
        for (i, t) in input.tracked.iter().enumerate() {
            let path = plots.join(format!("trajectory_{}.svg", label_slug(&t.label)));
            fs::write(&path, trajectory_plot(input, i))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Distribution of per-circuit update rates.
#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub n: usize,
    /// Circuits per second at the median update time.
    pub median_rate: f64,
    pub mean_rate: f64,
    /// Update-time quantiles in microseconds: min, 10%, 50%, 90%, max.
    pub quantiles_us: [f64; 5],
}

pub fn throughput(wall_times_us: &[u64]) -> Option<Throughput> {
    if wall_times_us.is_empty() {
        return None;
    }
    let mut t: Vec<f64> = wall_times_us.iter().map(|&v| (v.max(1)) as f64).collect();
    t.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let pos = f * (t.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        t[lo] + (t[hi] - t[lo]) * (pos - lo as f64)
    };
    let quantiles_us = [q(0.0), q(0.1), q(0.5), q(0.9), q(1.0)];
    let total: f64 = t.iter().sum();
    Some(Throughput {
        n: t.len(),
        median_rate: 1e6 / quantiles_us[2],
        mean_rate: 1e6 * t.len() as f64 / total,
        quantiles_us,
    })
}

pub fn write_throughput_csv<W: Write>(tp: &Throughput, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n",
        "median_rate_per_s",
        "mean_rate_per_s",
        "min_us",
        "p10_us",
        "median_us",
        "p90_us",
        "max_us",
    ])?;
    let mut rec = vec![tp.n.to_string(), num(tp.median_rate), num(tp.mean_rate)];
    rec.extend(tp.quantiles_us.iter().map(|&v| num(v)));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

// SVG rendering

const WIDTH: f64 = 820.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Axes {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    log_y: bool,
}

impl Axes {
    fn new(x_max: f64, ys: impl Iterator<Item = f64>, log_y: bool) -> Self {
        let ys: Vec<f64> = ys.filter(|v| v.is_finite() && (!log_y || *v > 0.0)).collect();
        let (mut lo, mut hi) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = if log_y { (1e-6, 1.0) } else { (-1.0, 1.0) };
        }
        if log_y {
            lo = 10f64.powf(lo.log10().floor());
            hi = 10f64.powf(hi.log10().ceil());
            if hi <= lo {
                hi = lo * 10.0;
            }
        } else {
            let pad = if hi > lo { 0.05 * (hi - lo) } else { lo.abs().max(1e-3) };
            lo -= pad;
            hi += pad;
        }
        Self {
            x_min: 0.0,
            x_max: x_max.max(1.0),
            y_min: lo,
            y_max: hi,
            log_y,
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let t = if self.log_y {
            (y.max(self.y_min).log10() - self.y_min.log10()) / (self.y_max.log10() - self.y_min.log10())
        } else {
            (y - self.y_min) / (self.y_max - self.y_min)
        };
        HEIGHT - BOTTOM - t * (HEIGHT - TOP - BOTTOM)
    }

    fn frame(&self, svg: &mut String, title: &str, y_label: &str) {
        let (x0, x1) = (LEFT, WIDTH - RIGHT);
        let (y0, y1) = (HEIGHT - BOTTOM, TOP);
        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y0 - y1
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
            (x0 + x1) / 2.0,
            escape(title)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">circuit index k</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 10.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        for i in 0..=5 {
            let x = self.x_min + (self.x_max - self.x_min) * i as f64 / 5.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
                self.px(x),
                y0 + 16.0,
                x.round()
            );
        }
        let ticks: Vec<f64> = if self.log_y {
            let (a, b) = (self.y_min.log10().round() as i32, self.y_max.log10().round() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=4)
                .map(|i| self.y_min + (self.y_max - self.y_min) * i as f64 / 4.0)
                .collect()
        };
        for t in ticks {
            let y = self.py(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end" font-size="11">{:.2e}</text>"##,
                x0 - 6.0,
                y + 4.0,
                t
            );
        }
    }

    fn polyline(&self, svg: &mut String, pts: &[(f64, f64)], style: &str) {
        let coords: Vec<String> = pts
            .iter()
            .filter(|(_, y)| y.is_finite() && (!self.log_y || *y > 0.0))
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        if !coords.is_empty() {
            let _ = writeln!(svg, r#"<polyline fill="none" {style} points="{}"/>"#, coords.join(" "));
        }
    }
}

fn svg_open() -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn legend(svg: &mut String, entries: &[(&str, &str)]) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = TOP + 14.0 + 20.0 * i as f64;
        let x = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            x + 22.0,
            x + 28.0,
            y + 4.0,
            escape(name)
        );
    }
}

fn error_plot(input: &ReportInput<'_>) -> String {
    let rows = input.rows;
    let x_max = rows.last().map_or(1, |r| r.k) as f64;
    let mle_errors: Vec<(f64, f64, f64)> = match input.x_true {
        Some(x) => input
            .mle
            .iter()
            .map(|m| {
                let d = &m.x - x;
                (m.k as f64, d.norm_squared(), d.iter().map(|v| v.abs()).sum())
            })
            .collect(),
        None => Vec::new(),
    };
    let ys = rows
        .iter()
        .flat_map(|r| {
            [
                r.trace_p,
                r.trace_sqrt_p,
                r.mse.unwrap_or(f64::NAN),
                r.mae.unwrap_or(f64::NAN),
            ]
        })
        .chain(mle_errors.iter().flat_map(|e| [e.1, e.2]));
    let axes = Axes::new(x_max, ys, true);
    let mut svg = svg_open();
    axes.frame(&mut svg, "Estimation error and filter uncertainty", "error (log scale)");
    let series = |f: &dyn Fn(&MetricRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|v| (r.k as f64, v))).collect()
    };
    axes.polyline(
        &mut svg,
        &series(&|r| r.mse),
        r##"stroke="#1f77b4" stroke-width="1.5""##,
    );
    axes.polyline(
        &mut svg,
        &series(&|r| r.mae),
        r##"stroke="#ff7f0e" stroke-width="1.5""##,
    );
    axes.polyline(
        &mut svg,
        &series(&|r| Some(r.trace_p)),
        r##"stroke="#1f77b4" stroke-width="1.5" stroke-dasharray="6 4""##,
    );
    axes.polyline(
        &mut svg,
        &series(&|r| Some(r.trace_sqrt_p)),
        r##"stroke="#ff7f0e" stroke-width="1.5" stroke-dasharray="6 4""##,
    );
    for m in input.mle {
        let x = axes.px(m.k as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{}" stroke="#999" stroke-width="1"/>"##,
            HEIGHT - BOTTOM
        );
    }
    for &(k, se, ae) in &mle_errors {
        for (v, color) in [(se, "#1f77b4"), (ae, "#ff7f0e")] {
            if v > 0.0 {
                let _ = writeln!(
                    svg,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#888" stroke="{color}"/>"##,
                    axes.px(k),
                    axes.py(v)
                );
            }
        }
    }
    legend(
        &mut svg,
        &[
            ("MSE", "#1f77b4"),
            ("MAE", "#ff7f0e"),
            ("Tr(P) dashed", "#1f77b4"),
            ("Tr(sqrt P) dashed", "#ff7f0e"),
            ("batched MLE", "#888"),
        ],
    );
    svg.push_str("</svg>\n");
    svg
}

fn trajectory_plot(input: &ReportInput<'_>, index: usize) -> String {
    let rows = input.rows;
    let tracked = &input.tracked[index];
    let truth = input.x_true.map(|x| tracked.value(x));
    let est: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter_map(|r| r.tracked.get(index).map(|t| (r.k as f64, t.estimate, t.sigma)))
        .collect();
    let mle: Vec<(f64, f64)> = input.mle.iter().map(|m| (m.k as f64, tracked.value(&m.x))).collect();
    let ys = est
        .iter()
        .flat_map(|&(_, e, s)| [e - s, e + s])
        .chain(truth)
        .chain(mle.iter().map(|m| m.1));
    let x_max = rows.last().map_or(1, |r| r.k) as f64;
    let axes = Axes::new(x_max, ys, false);
    let mut svg = svg_open();
    axes.frame(&mut svg, &format!("Trajectory of {}", tracked.label), "rate");
    if !est.is_empty() {
        let upper: Vec<String> = est
            .iter()
            .map(|&(k, e, s)| format!("{:.2},{:.2}", axes.px(k), axes.py(e + s)))
            .collect();
        let lower: Vec<String> = est
            .iter()
            .rev()
            .map(|&(k, e, s)| format!("{:.2},{:.2}", axes.px(k), axes.py(e - s)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polygon fill="#1f77b4" fill-opacity="0.2" stroke="none" points="{} {}"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
    }
    let line: Vec<(f64, f64)> = est.iter().map(|&(k, e, _)| (k, e)).collect();
    axes.polyline(&mut svg, &line, r##"stroke="#1f77b4" stroke-width="1.5""##);
    if let Some(t) = truth {
        let y = axes.py(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="black" stroke-dasharray="2 3"/>"##,
            WIDTH - RIGHT
        );
    }
    for (k, v) in mle {
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#888"/>"##,
            axes.px(k),
            axes.py(v)
        );
    }
    legend(
        &mut svg,
        &[
            ("estimate", "#1f77b4"),
            ("true value (dotted)", "black"),
            ("batched MLE", "#888"),
        ],
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{initialize, FilterConfig};
    use crate::ptm::trace_sqrt_psd;
    use nalgebra::DMatrix;

    fn snapshot(k: usize, x_hat: Vec<f64>, p_diag: Vec<f64>) -> Snapshot {
        let p = DMatrix::from_diagonal(&DVector::from_vec(p_diag.clone()));
        Snapshot {
            k,
            circuit_id: format!("c{k}"),
            depth: k,
            x_hat,
            trace_p: p.trace(),
            trace_sqrt_p: trace_sqrt_psd(&p),
            tracked: vec![TrackedEstimate {
                label: "Gx:H:X".into(),
                estimate: 0.01,
                sigma: 0.002,
            }],
        }
    }

    #[test]
    fn metric_examples() {
        let x = DVector::from_vec(vec![0.1, -0.2]);
        let rows = compute_metrics(
            &[
                snapshot(0, vec![0.0, 0.0], vec![4.0, 9.0]),
                snapshot(1, vec![0.1, -0.2], vec![1.0, 1.0]),
            ],
            Some(&x),
        )
        .unwrap();
        assert!((rows[0].mse.unwrap() - x.norm_squared()).abs() < 1e-18);
        assert!((rows[0].trace_sqrt_p - 5.0).abs() < 1e-14);
        assert_eq!(rows[1].mse, Some(0.0));
        assert_eq!(rows[1].mae, Some(0.0));
        for r in &rows {
            assert!(r.mae.unwrap().powi(2) <= 2.0 * r.mse.unwrap() + 1e-18);
        }
        let live = compute_metrics(&[snapshot(0, vec![0.0, 0.0], vec![1.0, 1.0])], None).unwrap();
        assert_eq!(live[0].mse, None);
        assert!(compute_metrics(&[snapshot(0, vec![0.0], vec![1.0])], Some(&x)).is_err());
    }

    #[test]
    fn snapshot_sigma_is_covariance_diagonal() {
        let mut state = initialize(0.09f64, 3, None, FilterConfig::default()).unwrap();
        state.p[(1, 1)] = 0.25;
        let tracked = TrackedParameter {
            label: "e1".into(),
            weights: DVector::from_vec(vec![0.0, 1.0, 0.0]),
        };
        let s = Snapshot::capture(&state, "GxGx", 2, trace_sqrt_psd(&state.p), &[tracked]);
        assert!((s.tracked[0].sigma - 0.5).abs() < 1e-12);
        let mut buf = Vec::new();
        s.write_line(&mut buf).unwrap();
        s.write_line(&mut buf).unwrap();
        let back = Snapshot::read_all(buf.as_slice()).unwrap();
        assert_eq!(back, vec![s.clone(), s]);
    }

    #[test]
    fn emit_csv_and_svg() {
        let x = DVector::from_vec(vec![0.1, -0.2]);
        let snaps: Vec<Snapshot> = (0..5)
            .map(|k| {
                snapshot(
                    k,
                    vec![0.02 * k as f64, -0.04 * k as f64],
                    vec![1.0 / (k + 1) as f64; 2],
                )
            })
            .collect();
        let rows = compute_metrics(&snaps, Some(&x)).unwrap();
        let tracked = [TrackedParameter {
            label: "Gx:H:X".into(),
            weights: DVector::from_vec(vec![1.0, 0.0]),
        }];
        let mle = [MleMarker {
            k: 2,
            x: DVector::from_vec(vec![0.09, -0.19]),
        }];
        let input = ReportInput {
            rows: &rows,
            tracked: &tracked,
            x_true: Some(&x),
            mle: &mle,
        };
        let dir = tempfile::tempdir().unwrap();
        let files = emit(&input, dir.path(), ReportFormat::Svg).unwrap();
        assert_eq!(files.len(), 4);
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), rows.len() + 1);
        assert!(metrics.starts_with("k,circuit_id,depth,mse,mae,trace_P,trace_sqrtP,Gx:H:X,Gx:H:X_sigma"));
        assert!(dir.path().join("trajectory_Gx_H_X.csv").exists());
        for f in files.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")) {
            let text = fs::read_to_string(f).unwrap();
            roxmltree::Document::parse(&text).unwrap();
        }
        assert!(emit(&ReportInput { rows: &[], ..input }, dir.path(), ReportFormat::Csv).is_err());
    }

    #[test]
    fn throughput_stats() {
        let tp = throughput(&[1000, 2000, 3000, 4000, 100_000]).unwrap();
        assert_eq!(tp.quantiles_us[2], 3000.0);
        assert!((tp.median_rate - 1e6 / 3000.0).abs() < 1e-9);
        assert_eq!(tp.n, 5);
        assert!(throughput(&[]).is_none());
    }
}
