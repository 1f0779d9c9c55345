//! Output bundles: everything is rendered in memory and checked before the
//! first byte reaches the disk, then each file is written through a
//! temporary sibling and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use parabolic::experiments::{loglog_slope, Report, Table};
use parabolic::field::{self, Field};
use serde_json::{json, Map, Value};

/// One output file; `None` contents remove a stale file of that name.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: Option<Vec<u8>>,
}

impl Artifact {
    pub fn table(name: &str, t: &Table) -> Result<Self, String> {
        let csv = t.to_csv().map_err(|e| format!("{name}: {e}"))?;
        Ok(Self { name: name.into(), contents: Some(csv.into_bytes()) })
    }

    pub fn field(name: &str, f: &Field) -> Result<Self, String> {
        f.validate_finite().map_err(|e| format!("{name}: {e}"))?;
        let mut buf = Vec::new();
        field::write_csv(f, &mut buf).map_err(|e| format!("{name}: {e}"))?;
        Ok(Self { name: name.into(), contents: Some(buf) })
    }

    /// Log-log plot of `points`, or a removal when nothing is plottable.
    pub fn plot(name: &str, title: &str, labels: (&str, &str), points: &[(f64, f64)]) -> Self {
        Self { name: name.into(), contents: loglog_svg(title, labels.0, labels.1, points).map(String::into_bytes) }
    }
}

/// A finished run: its report, the files it produced and, when the run was
/// stopped early, why.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub command: String,
    pub report: Report,
    pub artifacts: Vec<Artifact>,
    pub stopped: Option<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.stopped.is_none() && self.report.passed()
    }

    /// The line printed at the end of a run.
    pub fn summary_line(&self, dir: &Path) -> String {
        let total = self.report.checks.len();
        let ok = self.report.checks.iter().filter(|c| c.passed).count();
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let mut line =
            format!("{} {}: {verdict} ({ok}/{total} criteria) -> {}", self.command, self.report.study, dir.display());
        if let Some(why) = &self.stopped {
            line.push_str(&format!("; {why}"));
        } else if let Some(c) = self.report.checks.iter().find(|c| !c.passed) {
            line.push_str(&format!("; first failure `{}`", c.name));
        }
        line
    }
}

fn number(name: &str, v: f64) -> Result<Value, String> {
    if v.is_nan() {
        return Err(format!("summary: `{name}` is NaN"));
    }
    // JSON has no infinities; they are kept as strings
    Ok(if v.is_finite() { json!(v) } else if v > 0.0 { json!("inf") } else { json!("-inf") })
}

pub fn summary_json(o: &Outcome, seed: Option<u64>) -> Result<String, String> {
    let mut criteria = Map::new();
    for c in &o.report.checks {
        criteria.insert(
            c.name.clone(),
            json!({ "passed": c.passed, "value": number(&c.name, c.value)?, "bound": number(&c.name, c.bound)? }),
        );
    }
    let mut recorded = Map::new();
    for (n, v) in &o.report.recorded {
        recorded.insert(n.clone(), number(n, *v)?);
    }
    let doc = json!({
        "schema": crate::config::SCHEMA,
        "command": o.command,
        "name": o.report.study,
        "seed": seed,
        "passed": o.passed(),
        "stopped": o.stopped,
        "criteria": criteria,
        "recorded": recorded,
    });
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| e.to_string())?;
    s.push('\n');
    Ok(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Renders `summary.json`, then writes every artifact. Nothing is written
/// unless all of it renders.
pub fn emit(o: &Outcome, dir: &Path, seed: Option<u64>) -> Result<Vec<PathBuf>, String> {
    let summary = summary_json(o, seed)?;
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let mut written = Vec::new();
    for a in &o.artifacts {
        let path = dir.join(&a.name);
        match &a.contents {
            Some(bytes) => {
                write_atomic(&path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
                written.push(path);
            }
            None if path.exists() => {
                fs::remove_file(&path).map_err(|e| format!("cannot remove {}: {e}", path.display()))?;
            }
            None => {}
        }
    }
    let path = dir.join("summary.json");
    write_atomic(&path, summary.as_bytes()).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    written.push(path);
    Ok(written)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 70.0;

/// Decade range covering `v` (already in log10), at least one decade wide.
fn log_range(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = v.clone().fold(f64::INFINITY, f64::min).floor();
    let hi = v.fold(f64::NEG_INFINITY, f64::max).ceil();
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, lo + 1.0)
    }
}

/// Self-contained SVG: one circle per positive point, decade grid and the
/// least-squares line of `log y` on `log x` when two or more points have
/// distinct abscissae. `None` when no point is positive.
pub fn loglog_svg(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> Option<String> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| (p.0.log10(), p.1.log10())).collect();
    if pts.is_empty() {
        return None;
    }
    let (x0, x1) = log_range(pts.iter().map(|p| p.0));
    let (y0, y1) = log_range(pts.iter().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    s.push_str(&format!("<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n", W / 2.0, escape(title)));
    for d in x0 as i64..=x1 as i64 {
        let x = sx(d as f64);
        s.push_str(&format!(
            "<line class=\"grid\" x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>\n",
            PAD,
            H - PAD
        ));
        s.push_str(&format!("<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">1e{d}</text>\n", H - PAD + 18.0));
    }
    for d in y0 as i64..=y1 as i64 {
        let y = sy(d as f64);
        s.push_str(&format!(
            "<line class=\"grid\" x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n",
            PAD,
            W - PAD
        ));
        s.push_str(&format!("<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">1e{d}</text>\n", PAD - 6.0, y + 4.0));
    }
    s.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    ));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", W / 2.0, H - 20.0, escape(xlabel)));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    ));

    let raw: Vec<(f64, f64)> = pts.iter().map(|p| (10f64.powf(p.0), 10f64.powf(p.1))).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
    if let Some(b) = loglog_slope(&xs, &ys) {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let fit = |x: f64| my + b * (x - mx);
        s.push_str(&format!(
            "<line class=\"fit\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#c33\" stroke-width=\"1.5\"/>\n",
            sx(lo),
            sy(fit(lo)),
            sx(hi),
            sy(fit(hi))
        ));
        s.push_str(&format!("<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#c33\">slope {b:.4}</text>\n", PAD + 8.0, PAD + 16.0));
    }
    for (x, y) in &pts {
        s.push_str(&format!("<circle class=\"marker\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#235\"/>\n", sx(*x), sy(*y)));
    }
    s.push_str("</svg>\n");
    Some(s)
}
