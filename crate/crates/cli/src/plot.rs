//! Deterministic SVG charts with their data as CSV: tau and loss per epoch,
//! and test H@5 per alpha.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::manifest::RunManifest;
use crate::manifest::MANIFEST_FILE;
use crate::pipeline::{ALPHA_SWEEP_FILE, METRICS_FILE};
use crate::summary::seed_dirs;
use crate::CliError;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;

/// One row of a run's `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct EpochRow {
    pub regime: String,
    pub alpha: Option<f64>,
    pub epoch: usize,
    pub loss: f64,
    pub loss_real: Option<f64>,
    pub loss_sd: Option<f64>,
    pub tau: f64,
    pub d_t: Option<f64>,
    pub d0: Option<f64>,
    pub m: Option<usize>,
    pub valid_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn read_epoch_rows(path: &Path) -> Result<Vec<EpochRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Plot(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<EpochRow>, _>>()
        .map_err(|e| CliError::Plot(format!("{}: {e}", path.display())))
}

fn series_name(seed: u64, r: &EpochRow) -> String {
    match r.alpha {
        Some(a) => format!("seed {seed} {} a={a}", r.regime),
        None => format!("seed {seed} {}", r.regime),
    }
}

/// Group rows into one series per (seed, regime, alpha) in file order.
pub fn epoch_series(runs: &[(u64, Vec<EpochRow>)], keep: impl Fn(&EpochRow) -> bool, y: impl Fn(&EpochRow) -> f64) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for (seed, rows) in runs {
        for r in rows.iter().filter(|r| keep(r)) {
            let name = series_name(*seed, r);
            let p = (r.epoch as f64, y(r));
            match out.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push(p),
                None => out.push(Series { name, points: vec![p] }),
            }
        }
    }
    out
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, fmt(W / 2.0), escape(title));
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(
        svg,
        r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
        fmt(x0),
        fmt(y1),
        fmt(x0),
        fmt(y0),
        fmt(x1),
        fmt(y0)
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, fmt((x0 + x1) / 2.0), fmt(H - 10.0), escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        fmt((y0 + y1) / 2.0),
        fmt((y0 + y1) / 2.0),
        escape(y_label)
    );
}

fn y_ticks(svg: &mut String, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - BOTTOM - (H - BOTTOM - TOP) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, fmt(LEFT - 6.0), fmt(y + 4.0));
    }
}

/// Line chart with one polyline and legend entry per series.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (xlo, xhi) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (ylo, yhi) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| LEFT + (x - xlo) / (xhi - xlo) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y - ylo) / (yhi - ylo) * (H - BOTTOM - TOP);
    let mut svg = String::new();
    frame(&mut svg, title, x_label, y_label);
    y_ticks(&mut svg, ylo, yhi);
    let xs: std::collections::BTreeSet<i64> =
        series.iter().flat_map(|s| s.points.iter().map(|p| p.0.round() as i64)).collect();
    for x in xs {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#, fmt(sx(x as f64)), fmt(H - BOTTOM + 16.0));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y)))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        for &(x, y) in &s.points {
            let _ = writeln!(svg, r#"<circle cx="{}" cy="{}" r="2.5" fill="{color}"/>"#, fmt(sx(x)), fmt(sy(y)));
        }
        let ly = TOP + 14.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, fmt(lx), fmt(ly));
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, fmt(lx + 14.0), fmt(ly + 9.0), escape(&s.name));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Vertical bars from zero.
pub fn bar_chart_svg(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let hi = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let hi = if hi > 0.0 { hi * 1.1 } else { 1.0 };
    let mut svg = String::new();
    frame(&mut svg, title, "", y_label);
    y_ticks(&mut svg, 0.0, hi);
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v / hi * (H - BOTTOM - TOP);
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
            fmt(x),
            fmt(H - BOTTOM - h),
            fmt(slot * 0.7),
            fmt(h),
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, fmt(x + slot * 0.35), fmt(H - BOTTOM + 16.0), escape(label));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{v:.4}</text>"#, fmt(x + slot * 0.35), fmt(H - BOTTOM - h - 4.0));
    }
    svg.push_str("</svg>\n");
    svg
}

fn series_csv(y_name: &str, series: &[Series]) -> String {
    let mut out = format!("series,epoch,{y_name}\n");
    for s in series {
        for (x, y) in &s.points {
            let _ = writeln!(out, "{},{x},{y:?}", s.name);
        }
    }
    out
}

fn seed_of(dir: &Path) -> Result<u64, CliError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| CliError::Plot(e.to_string()))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Plot(e.to_string()))?;
    Ok(m.seed)
}

/// Seed-mean test H@5 per (regime, alpha) from every `alpha_sweep.csv`.
pub fn alpha_sweep_bars(dirs: &[PathBuf], regime: Option<&str>) -> Result<Vec<(String, f64)>, CliError> {
    let mut acc: BTreeMap<(String, u64), (String, f64, usize)> = BTreeMap::new();
    for d in dirs {
        let path = d.join(ALPHA_SWEEP_FILE);
        if !path.exists() || std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true) {
            continue;
        }
        let mut r = csv::Reader::from_path(&path).map_err(|e| CliError::Plot(e.to_string()))?;
        let header = r.headers().map_err(|e| CliError::Plot(e.to_string()))?.clone();
        let col = |n: &str| header.iter().position(|h| h == n).ok_or_else(|| CliError::Plot(format!("{}: no {n}", path.display())));
        let (ri, ai, hi) = (col("regime")?, col("alpha")?, col("H@5")?);
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::Plot(e.to_string()))?;
            if regime.is_some_and(|g| g != &rec[ri]) {
                continue;
            }
            let alpha: f64 = rec[ai].parse().map_err(|e| CliError::Plot(format!("alpha: {e}")))?;
            let h: f64 = rec[hi].parse().map_err(|e| CliError::Plot(format!("H@5: {e}")))?;
            // Sort by regime then alpha; alpha is non-negative so its bits order like the value.
            let e = acc
                .entry((rec[ri].to_string(), alpha.to_bits()))
                .or_insert_with(|| (format!("{} a={alpha}", &rec[ri]), 0.0, 0));
            e.1 += h;
            e.2 += 1;
        }
    }
    Ok(acc.into_values().map(|(label, sum, n)| (label, sum / n as f64)).collect())
}

/// Files written by [`plot_results`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub tau: Vec<Series>,
    pub loss: Vec<Series>,
    pub alpha_bars: Vec<(String, f64)>,
}

/// Write tau, loss and alpha-sweep charts for every seed found under `paths`.
pub fn plot_results(paths: &[PathBuf], out: &Path, regime: Option<&str>) -> Result<PlotOutput, CliError> {
    let mut dirs = Vec::new();
    for p in paths {
        dirs.extend(seed_dirs(p).map_err(|e| CliError::Plot(e.to_string()))?);
    }
    let mut runs = Vec::new();
    for d in &dirs {
        let path = d.join(METRICS_FILE);
        if path.exists() {
            runs.push((seed_of(d)?, read_epoch_rows(&path)?));
        }
    }
    let keep = |r: &EpochRow| regime.map_or(true, |g| g == r.regime);
    if runs.iter().all(|(_, rows)| !rows.iter().any(keep)) {
        return Err(CliError::Plot("no epoch metrics to plot".into()));
    }
    let tau = epoch_series(&runs, |r| keep(r) && r.m.is_some(), |r| r.tau);
    let loss = epoch_series(&runs, keep, |r| r.loss);
    let alpha_bars = alpha_sweep_bars(&dirs, regime)?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Plot(e.to_string()))?;
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<(), CliError> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::Plot(format!("{}: {e}", p.display())))?;
        files.push(p);
        Ok(())
    };
    put("tau.csv", series_csv("tau", &tau))?;
    put("tau.svg", line_chart_svg("Curriculum weight per epoch", "epoch", "tau", &tau))?;
    put("loss.csv", series_csv("loss", &loss))?;
    put("loss.svg", line_chart_svg("Training loss per epoch", "epoch", "loss", &loss))?;
    if !alpha_bars.is_empty() {
        let mut csv = String::from("bar,mean_test_H@5\n");
        for (l, v) in &alpha_bars {
            let _ = writeln!(csv, "{l},{v:?}");
        }
        put("alpha_sweep.csv", csv)?;
        put("alpha_sweep.svg", bar_chart_svg("Test H@5 per alpha (seed mean)", "H@5", &alpha_bars))?;
    }
    Ok(PlotOutput {
        files,
        tau,
        loss,
        alpha_bars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, alpha: Option<f64>, tau: f64) -> EpochRow {
        EpochRow {
            regime: "soft".into(),
            alpha,
            epoch,
            loss: 1.0 / epoch as f64,
            loss_real: None,
            loss_sd: None,
            tau,
            d_t: Some(1.0),
            d0: Some(1.0),
            m: alpha.map(|_| 8),
            valid_score: 0.0,
        }
    }

    #[test]
    fn seven_epochs_give_seven_points() {
        let rows: Vec<EpochRow> = (1..=7).map(|e| row(e, Some(1.0), 1.0 / e as f64)).collect();
        let s = epoch_series(&[(0, rows)], |r| r.m.is_some(), |r| r.tau);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points.len(), 7);
    }

    #[test]
    fn alpha_zero_is_flat() {
        let rows: Vec<EpochRow> = (1..=4).map(|e| row(e, Some(0.0), 1.0)).collect();
        let s = epoch_series(&[(2, rows)], |r| r.m.is_some(), |r| r.tau);
        assert!(s[0].points.iter().all(|p| p.1 == 1.0));
        let svg = line_chart_svg("t", "x", "y", &s);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn charts_are_deterministic() {
        let s = vec![Series {
            name: "a<b".into(),
            points: vec![(1.0, 0.5), (2.0, 0.25)],
        }];
        assert_eq!(line_chart_svg("t", "x", "y", &s), line_chart_svg("t", "x", "y", &s));
        assert!(line_chart_svg("t", "x", "y", &s).contains("a&lt;b"));
        let bars = vec![("x".to_string(), 0.2), ("y".to_string(), 0.0)];
        assert_eq!(bar_chart_svg("t", "y", &bars), bar_chart_svg("t", "y", &bars));
    }
}
