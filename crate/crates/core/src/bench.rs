//! Benchmark statistics: outlier masking, ratios to a baseline with
//! propagated error, CSV rows and a bar chart.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Scale turning a median absolute deviation into a standard deviation
/// estimate for normal data.
pub const MAD_SCALE: f64 = 1.4826;
/// Points further than this many scaled MADs from the median are masked.
pub const MAD_CUTOFF: f64 = 3.0;
pub const MIN_KEPT: usize = 3;
pub const DEFAULT_REPETITIONS: usize = 10;
pub const CSV_COLUMNS: [&str; 11] = [
    "mode", "runs", "kept", "mean_s", "std_s", "std_pop_s", "sem_s", "ratio", "ratio_err", "stops", "status",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("only {kept} of {total} samples survive masking; at least {MIN_KEPT} are needed")]
    Degenerate { kept: usize, total: usize },
    #[error("baseline mean is zero; the ratio is undefined")]
    UndefinedRatio,
    #[error("sample value {0} is not a finite non-negative time")]
    BadSample(f64),
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("benchmark manifest: {0}")]
    Manifest(String),
    #[error("baseline {0} failed ({1}); no ratios can be computed")]
    BaselineFailed(String, String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn sorted(v: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = v.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Marks the points kept (true) after repeatedly removing those outside
/// median ± 3 scaled MADs of the survivors, until nothing more changes.
pub fn mask_outliers(samples: &[f64]) -> Result<Vec<bool>, StatsError> {
    if let Some(bad) = samples.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(StatsError::BadSample(*bad));
    }
    let mut mask = vec![true; samples.len()];
    loop {
        let kept = || samples.iter().zip(&mask).filter(|(_, k)| **k).map(|(x, _)| *x);
        if kept().count() < MIN_KEPT {
            break;
        }
        let med = median(&sorted(kept()));
        let mad = median(&sorted(kept().map(|x| (x - med).abs())));
        let limit = MAD_CUTOFF * MAD_SCALE * mad;
        let next: Vec<bool> = samples
            .iter()
            .zip(&mask)
            .map(|(x, k)| *k && (x - med).abs() <= limit)
            .collect();
        if next == mask {
            break;
        }
        mask = next;
    }
    let kept = mask.iter().filter(|k| **k).count();
    if kept < MIN_KEPT {
        return Err(StatsError::Degenerate {
            kept,
            total: samples.len(),
        });
    }
    Ok(mask)
}

/// Mean and spread of a set of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    /// Population standard deviation (n denominator).
    pub std_pop: f64,
    /// Standard deviation of the mean, `std / sqrt(n)`.
    pub sem: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
    let std = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    Summary {
        n,
        mean,
        std,
        std_pop: (ss / n as f64).sqrt(),
        sem: std / (n as f64).sqrt(),
    }
}

/// Wall-clock samples of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSample {
    pub tag: String,
    pub samples: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RunSample {
    pub fn new(tag: &str, samples: Vec<f64>) -> Result<Self, StatsError> {
        let mask = mask_outliers(&samples)?;
        Ok(RunSample {
            tag: tag.to_string(),
            samples,
            mask,
        })
    }

    pub fn kept(&self) -> Vec<f64> {
        self.samples.iter().zip(&self.mask).filter(|(_, k)| **k).map(|(x, _)| *x).collect()
    }

    pub fn summary(&self) -> Summary {
        summarize(&self.kept())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioResult {
    pub t_i: f64,
    pub dt_i: f64,
    pub t_host: f64,
    pub dt_host: f64,
    pub r: f64,
    pub dr: f64,
}

/// `R = t_i / t_host` with the error propagated from both deviations:
/// `ΔR = R·sqrt((Δt_i/t_i)² + (Δt_host/t_host)²)`.
pub fn ratio_of(t_i: f64, dt_i: f64, t_host: f64, dt_host: f64) -> Result<RatioResult, StatsError> {
    if t_host == 0.0 {
        return Err(StatsError::UndefinedRatio);
    }
    let r = t_i / t_host;
    // Same quantity written without dividing by t_i, which may be zero.
    let dr = (dt_i / t_host).hypot(r * (dt_host / t_host));
    Ok(RatioResult {
        t_i,
        dt_i,
        t_host,
        dt_host,
        r,
        dr: dr.abs(),
    })
}

/// Ratio of two masked samples using their sample standard deviations.
pub fn ratio(env: &RunSample, base: &RunSample) -> Result<RatioResult, StatsError> {
    let e = env.summary();
    let b = base.summary();
    ratio_of(e.mean, e.std, b.mean, b.std)
}

/// Declarative description of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// Container name or id the workload runs in.
    pub container: String,
    pub command: Vec<String>,
    /// Host command line for the `native` tag, when `command` names
    /// container paths the host lacks.
    #[serde(default)]
    pub native_command: Option<Vec<String>>,
    /// Environment tags; `native` runs the command on the host.
    pub modes: Vec<String>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_baseline")]
    pub baseline: String,
}

fn default_repetitions() -> usize {
    DEFAULT_REPETITIONS
}

fn default_baseline() -> String {
    "native".into()
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let m: Manifest = toml::from_str(text).map_err(|e| BenchError::Manifest(e.to_string()))?;
        if m.command.is_empty() || m.native_command.as_ref().is_some_and(|c| c.is_empty()) {
            return Err(BenchError::Manifest("command is empty".into()));
        }
        if m.repetitions < MIN_KEPT {
            return Err(BenchError::Manifest(format!("at least {MIN_KEPT} repetitions are needed")));
        }
        if !m.modes.contains(&m.baseline) {
            return Err(BenchError::Manifest(format!("baseline {:?} is not among the modes", m.baseline)));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// One timed execution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub seconds: f64,
    pub exit_code: i32,
    /// Tracer stops, for engines that count them.
    pub stops: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub mode: String,
    pub sample: Vec<f64>,
    pub mask: Vec<bool>,
    pub summary: Option<Summary>,
    pub ratio: Option<RatioResult>,
    /// Mean stops per run.
    pub stops: Option<u64>,
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub baseline: String,
    pub rows: Vec<Row>,
}

/// Runs every mode `repetitions` times, strictly one run at a time, and
/// relates each mode to the baseline. A mode with a failing run is kept in
/// the report but flagged.
pub fn run_matrix(
    manifest: &Manifest,
    runner: &mut dyn FnMut(&str) -> Result<Measurement, String>,
) -> Result<Report, BenchError> {
    let mut rows = Vec::new();
    for mode in &manifest.modes {
        let mut samples = Vec::with_capacity(manifest.repetitions);
        let mut stops: Vec<u64> = Vec::new();
        let mut failure = None;
        for rep in 0..manifest.repetitions {
            match runner(mode) {
                Ok(m) if m.exit_code == 0 => {
                    samples.push(m.seconds);
                    stops.extend(m.stops);
                }
                Ok(m) => {
                    failure = Some(format!("run {rep} exited with {}", m.exit_code));
                    break;
                }
                Err(e) => {
                    failure = Some(format!("run {rep}: {e}"));
                    break;
                }
            }
        }
        log::info!("{mode}: {} runs", samples.len());
        let stops = (!stops.is_empty()).then(|| stops.iter().sum::<u64>() / stops.len() as u64);
        let row = match failure {
            Some(f) => Row {
                mode: mode.clone(),
                sample: samples,
                mask: Vec::new(),
                summary: None,
                ratio: None,
                stops,
                status: RowStatus::Failed(f),
            },
            None => match RunSample::new(mode, samples.clone()) {
                Ok(rs) => Row {
                    mode: mode.clone(),
                    summary: Some(rs.summary()),
                    sample: samples,
                    mask: rs.mask,
                    ratio: None,
                    stops,
                    status: RowStatus::Ok,
                },
                Err(e) => Row {
                    mode: mode.clone(),
                    sample: samples,
                    mask: Vec::new(),
                    summary: None,
                    ratio: None,
                    stops,
                    status: RowStatus::Failed(e.to_string()),
                },
            },
        };
        rows.push(row);
    }
    let base = rows
        .iter()
        .find(|r| r.mode == manifest.baseline)
        .and_then(|r| r.summary)
        .ok_or_else(|| {
            let why = rows
                .iter()
                .find_map(|r| match &r.status {
                    RowStatus::Failed(w) if r.mode == manifest.baseline => Some(w.clone()),
                    _ => None,
                })
                .unwrap_or_else(|| "no samples".into());
            BenchError::BaselineFailed(manifest.baseline.clone(), why)
        })?;
    for row in &mut rows {
        if let Some(s) = row.summary {
            row.ratio = Some(ratio_of(s.mean, s.std, base.mean, base.std)?);
        }
    }
    Ok(Report {
        name: manifest.name.clone(),
        baseline: manifest.baseline.clone(),
        rows,
    })
}

impl Report {
    pub fn row(&self, mode: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        let num = |x: Option<f64>| x.map(|v| format!("{v:.17e}")).unwrap_or_default();
        for r in &self.rows {
            let s = r.summary;
            w.write_record([
                r.mode.clone(),
                r.sample.len().to_string(),
                s.map(|s| s.n.to_string()).unwrap_or_default(),
                num(s.map(|s| s.mean)),
                num(s.map(|s| s.std)),
                num(s.map(|s| s.std_pop)),
                num(s.map(|s| s.sem)),
                num(r.ratio.map(|x| x.r)),
                num(r.ratio.map(|x| x.dr)),
                r.stops.map(|x| x.to_string()).unwrap_or_default(),
                match &r.status {
                    RowStatus::Ok => "ok".to_string(),
                    RowStatus::Failed(why) => format!("failed: {why}"),
                },
            ])?;
        }
        w.flush().map_err(|source| BenchError::Io {
            path: PathBuf::from("<csv>"),
            source,
        })?;
        Ok(())
    }

    /// Bar chart of the ratios with error bars, normalized so the baseline
    /// bar has height 1. Failed modes are left out.
    pub fn svg(&self) -> String {
        let bars: Vec<(&str, RatioResult)> = self
            .rows
            .iter()
            .filter(|r| r.status == RowStatus::Ok)
            .filter_map(|r| r.ratio.map(|x| (r.mode.as_str(), x)))
            .collect();
        let (w, h, left, bottom, top) = (120.0 + 90.0 * bars.len() as f64, 360.0, 60.0, 40.0, 30.0);
        let ymax = bars.iter().map(|(_, x)| x.r + x.dr).fold(1.0f64, f64::max) * 1.15;
        let plot_h = h - bottom - top;
        let y = |v: f64| h - bottom - v / ymax * plot_h;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<title>{}: time relative to {}</title>"#, xml(&self.name), xml(&self.baseline));
        let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, y(0.0), w - 20.0, y(0.0));
        let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, y(0.0));
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="gray" stroke-dasharray="4 3"/><text x="{2}" y="{3}" text-anchor="end">1.0</text>"#,
            y(1.0),
            w - 20.0,
            left - 6.0,
            y(1.0) + 4.0
        );
        for (i, (mode, x)) in bars.iter().enumerate() {
            let bx = left + 30.0 + 90.0 * i as f64;
            let _ = writeln!(
                s,
                r##"<rect class="bar" data-mode="{}" data-ratio="{:e}" data-error="{:e}" x="{bx}" y="{}" width="50" height="{}" fill="#4a7fb5"/>"##,
                xml(mode),
                x.r,
                x.dr,
                y(x.r),
                y(0.0) - y(x.r)
            );
            let cx = bx + 25.0;
            let _ = writeln!(
                s,
                r#"<path class="error" d="M{cx} {} V{} M{} {} H{} M{} {} H{}" stroke="black"/>"#,
                y(x.r - x.dr),
                y(x.r + x.dr),
                cx - 8.0,
                y(x.r + x.dr),
                cx + 8.0,
                cx - 8.0,
                y(x.r - x.dr),
                cx + 8.0
            );
            let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#, h - bottom + 16.0, xml(mode));
            let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">{:.3}</text>"#, y(x.r + x.dr) - 6.0, x.r);
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
