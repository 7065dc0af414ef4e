//! Self-contained SVG line charts: global and target accuracy per round, one
//! series per strategy, averaged over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::federation::Phase;
use crate::param_space::Regime;

use super::pipeline::MetricsLog;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Global,
    Target,
}

impl Metric {
    fn slug(self) -> &'static str {
        match self {
            Metric::Global => "global",
            Metric::Target => "target",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Global => "Test accuracy",
            Metric::Target => "Target client test accuracy",
        }
    }
}

type RoundSums = BTreeMap<usize, (f64, usize)>;

/// One line on a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(round, mean accuracy)`; rounds with no value are absent.
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub series: Vec<Series>,
    /// Rounds after which a new phase starts.
    pub phase_boundaries: Vec<f64>,
    pub max_round: usize,
    pub percent: bool,
}

/// "SATA NTK", "CTT standard", ...
pub fn series_label(log: &MetricsLog) -> String {
    let regime = match log.meta.regime {
        Regime::Ntk => "NTK",
        Regime::Standard => "standard",
    };
    format!("{} {regime}", log.meta.strategy.label())
}

/// Averages `metric` over all logs sharing a series label.
pub fn build_chart(logs: &[&MetricsLog], metric: Metric, title: String, percent: bool) -> Chart {
    // label -> round -> (sum, count)
    let mut grouped: Vec<(String, RoundSums)> = Vec::new();
    for log in logs {
        let label = series_label(log);
        let idx = match grouped.iter().position(|(l, _)| *l == label) {
            Some(i) => i,
            None => {
                grouped.push((label, BTreeMap::new()));
                grouped.len() - 1
            }
        };
        for r in &log.reports {
            let value = match metric {
                Metric::Global => Some(r.global_test_accuracy),
                Metric::Target => r.target_test_accuracy,
            };
            if let Some(v) = value {
                let slot = grouped[idx].1.entry(r.round).or_insert((0.0, 0));
                slot.0 += v;
                slot.1 += 1;
            }
        }
    }
    let series = grouped
        .into_iter()
        .map(|(label, sums)| Series {
            label,
            points: sums.into_iter().map(|(r, (s, n))| (r, s / n as f64)).collect(),
        })
        .collect();
    let mut phase_boundaries = Vec::new();
    if let Some(first) = logs.first() {
        for w in first.reports.windows(2) {
            if w[0].phase != w[1].phase {
                phase_boundaries.push(w[0].round as f64 + 0.5);
            }
        }
    }
    let max_round = logs
        .iter()
        .flat_map(|l| l.reports.iter().map(|r| r.round))
        .max()
        .unwrap_or(1);
    Chart {
        title,
        series,
        phase_boundaries,
        max_round,
        percent,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let scale = if self.percent { 100.0 } else { 1.0 };
        let max_round = self.max_round.max(1) as f64;
        let x = |round: f64| LEFT + plot_w * if max_round > 1.0 { (round - 1.0) / (max_round - 1.0) } else { 0.5 };
        let y = |acc: f64| TOP + plot_h * (1.0 - acc.clamp(0.0, 1.0));

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + plot_w / 2.0,
            escape(&self.title)
        );
        // y axis: 0 to 1 (or 100) in fifths
        for i in 0..=5 {
            let acc = i as f64 / 5.0;
            let yy = y(acc);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/>"##,
                LEFT + plot_w
            );
            let label = if self.percent {
                format!("{:.0}", acc * scale)
            } else {
                format!("{acc:.1}")
            };
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
                LEFT - 6.0,
                yy + 4.0
            );
        }
        let step = (self.max_round as f64 / 10.0).ceil().max(1.0) as usize;
        for r in (1..=self.max_round).step_by(step) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{r}</text>"#,
                x(r as f64),
                TOP + plot_h + 18.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">accuracy{}</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0,
            if self.percent { " (%)" } else { "" }
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
        );
        for &b in &self.phase_boundaries {
            let xx = x(b);
            let _ = writeln!(
                s,
                r##"<line class="phase-boundary" x1="{xx:.2}" y1="{TOP}" x2="{xx:.2}" y2="{:.2}" stroke="#555555" stroke-dasharray="5,4"/>"##,
                TOP + plot_h
            );
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(r, a)| format!("{:.2},{:.2}", x(r as f64), y(a)))
                .collect();
            let _ = writeln!(
                s,
                r#"<g class="series" data-label="{}">"#,
                escape(&series.label)
            );
            if pts.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    pts.join(" ")
                );
            }
            for &(r, a) in &series.points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    x(r as f64),
                    y(a)
                );
            }
            let _ = writeln!(s, "</g>");
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = LEFT + plot_w + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
                lx + 18.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 24.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Two charts per β (global and target accuracy). Returns the written paths.
pub fn emit_plots(logs: &[&MetricsLog], dir: &Path, percent: bool) -> Result<Vec<PathBuf>> {
    if logs.is_empty() {
        return Err(Error::Argument("no runs to plot".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut betas: Vec<f64> = Vec::new();
    for log in logs {
        if !betas.contains(&log.meta.beta) {
            betas.push(log.meta.beta);
        }
    }
    let mut written = Vec::new();
    for beta in betas {
        let group: Vec<&MetricsLog> = logs.iter().copied().filter(|l| l.meta.beta == beta).collect();
        for metric in [Metric::Global, Metric::Target] {
            let chart = build_chart(&group, metric, format!("{} (beta = {beta})", metric.title()), percent);
            let path = dir.join(format!("{}_beta{beta}.svg", metric.slug()));
            std::fs::write(&path, chart.to_svg()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Rounds at which each phase begins in `log`.
pub fn phase_starts(log: &MetricsLog) -> Vec<(Phase, usize)> {
    let mut out: Vec<(Phase, usize)> = Vec::new();
    for r in &log.reports {
        if out.last().is_none_or(|(p, _)| *p != r.phase) {
            out.push((r.phase, r.round));
        }
    }
    out
}
