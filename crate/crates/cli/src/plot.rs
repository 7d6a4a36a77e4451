//! Learning-curve plots written as standalone SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gudrl_core::agent::Setting;
use gudrl_core::replay::mean_and_std;

use crate::curve::CurvePoint;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Mean across seeds at each progress value, with the spread across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub condition: String,
    pub progress: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub seeds: usize,
}

/// Groups curve points by condition (first-appearance order) and averages
/// over seeds.
pub fn aggregate(points: &[CurvePoint]) -> Vec<Series> {
    let mut order: Vec<&str> = Vec::new();
    let mut by: BTreeMap<&str, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut seeds: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for p in points {
        if !by.contains_key(p.condition.as_str()) {
            order.push(&p.condition);
        }
        by.entry(&p.condition).or_default().entry(p.progress).or_default().push(p.mean_return);
        let s = seeds.entry(&p.condition).or_default();
        if !s.contains(&p.seed) {
            s.push(p.seed);
        }
    }
    order
        .into_iter()
        .map(|c| {
            let mut s = Series {
                condition: c.to_string(),
                progress: Vec::new(),
                mean: Vec::new(),
                std: Vec::new(),
                seeds: seeds[c].len(),
            };
            for (progress, values) in &by[c] {
                let (m, sd) = mean_and_std(values);
                s.progress.push(*progress);
                s.mean.push(m);
                s.std.push(sd);
            }
            s
        })
        .collect()
}

fn colour(i: usize, n: usize) -> String {
    if n <= PALETTE.len() {
        PALETTE[i].to_string()
    } else {
        format!("hsl({:.0},65%,45%)", 360.0 * i as f64 / n as f64)
    }
}

fn nice_ceiling(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(x.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&v| v >= x)
        .unwrap_or(10.0 * mag)
}

/// Renders one plot for a setting. The band shows one standard deviation
/// across seeds and is drawn only with more than one seed.
pub fn emit_plot(points: &[CurvePoint], setting: Setting, dataset_mean: Option<f64>) -> String {
    let series = aggregate(points);
    let x_max = points.iter().map(|p| p.progress).max().unwrap_or(1).max(1) as f64;
    let y_data = series
        .iter()
        .flat_map(|s| s.mean.iter().zip(&s.std).map(|(m, d)| m + d))
        .chain(dataset_mean)
        .fold(0.0, f64::max);
    let y_max = if matches!(setting, Setting::Gcrl) {
        nice_ceiling(y_data)
    } else {
        nice_ceiling(y_data.max(500.0))
    };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + pw * x / x_max;
    let sy = |y: f64| TOP + ph * (1.0 - (y / y_max).clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        setting
    );

    for i in 0..=5 {
        let yv = y_max * i as f64 / 5.0;
        let y = sy(yv);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            trim(yv)
        );
        let xv = x_max * i as f64 / 5.0;
        let x = sx(xv);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            trim(xv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let x_label = if setting.interacts_with_env() { "environment steps" } else { "gradient steps" };
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x_label}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">return</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    let n = series.len();
    for (i, s) in series.iter().enumerate() {
        let c = colour(i, n);
        if s.seeds > 1 {
            let upper = s.progress.iter().zip(s.mean.iter().zip(&s.std));
            let mut pts: Vec<String> = upper
                .clone()
                .map(|(&p, (m, d))| format!("{:.2},{:.2}", sx(p as f64), sy(m + d)))
                .collect();
            pts.extend(upper.rev().map(|(&p, (m, d))| format!("{:.2},{:.2}", sx(p as f64), sy(m - d))));
            let _ = writeln!(
                svg,
                r#"<polygon class="band" points="{}" fill="{c}" fill-opacity="0.18" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let line: Vec<String> = s
            .progress
            .iter()
            .zip(&s.mean)
            .map(|(&p, m)| format!("{:.2},{:.2}", sx(p as f64), sy(*m)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" points="{}" fill="none" stroke="{c}" stroke-width="1.8"><title>{}</title></polyline>"#,
            line.join(" "),
            escape(&s.condition)
        );
        if n <= 12 {
            let ly = TOP + 12.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
                lx + 18.0,
                lx + 24.0,
                ly + 4.0,
                escape(&s.condition)
            );
        }
    }
    if n > 12 {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{n} conditions</text>"#,
            LEFT + pw + 12.0,
            TOP + 16.0
        );
    }
    if let Some(m) = dataset_mean {
        let y = sy(m);
        let _ = writeln!(
            svg,
            r#"<line class="dataset-mean" x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="1.5" stroke-dasharray="6 4"><title>dataset mean {m:.1}</title></line>"#,
            LEFT + pw
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn trim(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
