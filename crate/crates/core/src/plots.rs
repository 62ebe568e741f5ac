//! Minimal hand-rolled SVG output: per-planner line charts of uncertainty
//! and RMSE against distance traveled, plus a log-determinant heatmap of
//! the virtual map. No plotting dependency; the files are small and the
//! markup is simple enough to emit directly.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::harness::{PlannerKind, PlannerRun};
use crate::maps::VirtualMap;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 120.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

fn color(kind: PlannerKind) -> &'static str {
    match kind {
        PlannerKind::ShortestDistance => "#d62728",
        PlannerKind::VirtualMap => "#1f77b4",
        PlannerKind::Em => "#2ca02c",
    }
}

fn label(kind: PlannerKind) -> &'static str {
    match kind {
        PlannerKind::ShortestDistance => "shortest distance",
        PlannerKind::VirtualMap => "virtual map",
        PlannerKind::Em => "expectation-maximization",
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axes {
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Axes {
    fn fit(series: &[(PlannerKind, Vec<(f64, f64)>)]) -> Option<Self> {
        let mut a = Axes {
            xmin: f64::INFINITY,
            xmax: f64::NEG_INFINITY,
            ymin: f64::INFINITY,
            ymax: f64::NEG_INFINITY,
        };
        for (_, pts) in series {
            for &(x, y) in pts {
                a.xmin = a.xmin.min(x);
                a.xmax = a.xmax.max(x);
                a.ymin = a.ymin.min(y);
                a.ymax = a.ymax.max(y);
            }
        }
        if !a.xmin.is_finite() {
            return None;
        }
        // avoid degenerate ranges
        if a.xmax - a.xmin < 1e-9 {
            a.xmax = a.xmin + 1.0;
        }
        if a.ymax - a.ymin < 1e-12 {
            a.ymax = a.ymin + 1.0;
        }
        a.ymin = a.ymin.min(0.0);
        Some(a)
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.xmin) / (self.xmax - self.xmin) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B
            - (y - self.ymin) / (self.ymax - self.ymin) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

/// Render one multi-series line chart. Errors when no series has data.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(PlannerKind, Vec<(f64, f64)>)],
) -> Result<String> {
    let axes = Axes::fit(series).ok_or(Error::NothingToPlot)?;
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = write!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        esc(title)
    );

    // frame and ticks
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let _ = write!(
        svg,
        r#"<path d="M {x0} {y1} L {x0} {y0} L {x1} {y0}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let xv = axes.xmin + f * (axes.xmax - axes.xmin);
        let yv = axes.ymin + f * (axes.ymax - axes.ymin);
        let px = axes.sx(xv);
        let py = axes.sy(yv);
        let _ = write!(
            svg,
            r#"<line x1="{px}" y1="{y0}" x2="{px}" y2="{}" stroke="black"/>"#,
            y0 + 5.0
        );
        let _ = write!(
            svg,
            r#"<text x="{px}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{xv:.2}</text>"#,
            y0 + 20.0
        );
        let _ = write!(
            svg,
            r#"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/>"#,
            x0 - 5.0
        );
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{yv:.3}</text>"#,
            x0 - 8.0,
            py + 4.0
        );
    }
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        esc(x_label)
    );
    let _ = write!(
        svg,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(y_label)
    );

    for (i, (kind, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(
                d,
                "{}{} {} ",
                if j == 0 { "M " } else { "L " },
                axes.sx(x),
                axes.sy(y)
            );
        }
        let _ = write!(
            svg,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            d.trim_end(),
            color(*kind)
        );
        // legend entry
        let ly = MARGIN_T + 16.0 * i as f64 + 8.0;
        let _ = write!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#,
            x1 + 8.0,
            x1 + 30.0,
            color(*kind)
        );
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            x1 + 34.0,
            ly + 4.0,
            esc(label(*kind))
        );
    }
    svg.push_str("</svg>");
    Ok(svg)
}

fn per_planner_series<F>(runs: &[PlannerRun], mut f: F) -> Vec<(PlannerKind, Vec<(f64, f64)>)>
where
    F: FnMut(&PlannerRun) -> Vec<(f64, f64)>,
{
    runs.iter().map(|r| (r.kind, f(r))).collect()
}

/// Mean pose uncertainty against distance traveled, binned per planner.
pub fn uncertainty_vs_distance(runs: &[PlannerRun], bin: f64) -> Result<String> {
    let series = per_planner_series(runs, |run| {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for (_, t) in &run.trials {
            for r in &t.rows {
                let idx = (r.distance / bin) as usize;
                if sums.len() <= idx {
                    sums.resize(idx + 1, (0.0, 0));
                }
                sums[idx].0 += r.pose_uncertainty;
                sums[idx].1 += 1;
            }
        }
        sums.iter()
            .enumerate()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(i, (s, n))| ((i as f64 + 0.5) * bin, s / *n as f64))
            .collect()
    });
    line_chart(
        "Pose uncertainty vs distance",
        "distance traveled (m)",
        "det(cov)^(1/3)",
        &series,
    )
}

/// Position RMSE against distance traveled, binned per planner.
pub fn rmse_vs_distance(runs: &[PlannerRun], bin: f64) -> Result<String> {
    let series = per_planner_series(runs, |run| {
        let trials: Vec<_> = run.trials.iter().map(|(_, t)| t.rows.clone()).collect();
        crate::harness::rmse_by_distance(&trials, bin)
    });
    line_chart(
        "Position RMSE vs distance",
        "distance traveled (m)",
        "RMSE (m)",
        &series,
    )
}

/// Log-determinant heatmap of the virtual map, dark = well observed.
pub fn vmap_heatmap(vm: &VirtualMap) -> String {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for iy in 0..vm.height {
        for ix in 0..vm.width {
            let v = vm.log_det(vm.cell_index(ix, iy));
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-9);
    let cell = (640.0 / vm.width as f64).min(640.0 / vm.height as f64);
    let w = cell * vm.width as f64;
    let h = cell * vm.height as f64;
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    for iy in 0..vm.height {
        for ix in 0..vm.width {
            let f = (vm.log_det(vm.cell_index(ix, iy)) - lo) / span;
            // blue (low logdet, confident) to yellow (prior)
            let r = (255.0 * f) as u8;
            let g = (220.0 * f + 30.0) as u8;
            let b = (200.0 * (1.0 - f) + 40.0) as u8;
            let px = ix as f64 * cell;
            // row 0 drawn at the bottom to match world coordinates
            let py = (vm.height - 1 - iy) as f64 * cell;
            let _ = write!(
                svg,
                r#"<rect x="{px}" y="{py}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"/>"#
            );
        }
    }
    svg.push_str("</svg>");
    svg
}
