//! Plain-text tables and minimal SVG scatter charts from report files.

use std::fmt::Write as _;

use matsae_core::metrics::{ConfigResult, RankedConfig};
use matsae_core::retrieval::RetrievalEval;
use matsae_core::interp::RankSummary;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Scatter chart; series with `line` set are joined in x order.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], line: bool) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>"#,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, px(xv), HEIGHT - MARGIN + 14.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, MARGIN - 4.0, py(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = ser.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        if line {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, path.join(" "));
        }
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        if series.len() > 1 {
            let ly = MARGIN + 14.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
                WIDTH - MARGIN,
                escape(ser.label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn family(r: &ConfigResult) -> String {
    r.dict_sizes.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
}

/// One series per dictionary family, `y` against mean L0.
pub fn by_family<'a>(results: &'a [ConfigResult], families: &'a [String], y: impl Fn(&ConfigResult) -> f64) -> Vec<Series<'a>> {
    families
        .iter()
        .map(|f| Series {
            label: f,
            points: results.iter().filter(|r| &family(r) == f).map(|r| (r.mean_l0, y(r))).collect(),
        })
        .collect()
}

pub fn families(results: &[ConfigResult]) -> Vec<String> {
    let mut f: Vec<String> = results.iter().map(family).collect();
    f.sort_by_key(|s| s.split('-').next().and_then(|x| x.parse::<usize>().ok()));
    f.dedup();
    f
}

pub fn results_table(results: &[ConfigResult], ranking: &[RankedConfig]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<40} {:>7} {:>8} {:>6} {:>7} {:>9} {:>9} {:>9} {:>5}",
        "config", "R2", "L0", "alive", "M", "denseAUC", "sparseAUC", "rec@10", "rank"
    );
    for r in results {
        let rank = ranking
            .iter()
            .find(|c| c.id == r.id)
            .map(|c| c.final_rank.to_string())
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<40} {:>7.4} {:>8.2} {:>6} {:>7.4} {:>9.4} {:>9.4} {:>9.4} {:>5}",
            r.id,
            r.r2,
            r.mean_l0,
            r.alive,
            r.m_config,
            r.dense_auc,
            r.sparse_auc,
            r.recovery.get(&10).copied().unwrap_or(f64::NAN),
            rank
        );
    }
    s
}

pub fn ranking_table(ranking: &[RankedConfig]) -> String {
    let mut rows: Vec<&RankedConfig> = ranking.iter().collect();
    rows.sort_by(|a, b| a.final_rank.cmp(&b.final_rank).then(a.id.cmp(&b.id)));
    let mut s = String::new();
    let _ = writeln!(s, "{:>5} {:<40} {:>9} {:>9} {:>8}", "rank", "config", "mono", "perf", "combined");
    for r in rows {
        let _ = writeln!(s, "{:>5} {:<40} {:>9} {:>9} {:>8}", r.final_rank, r.id, r.mono_rank, r.perf_rank, r.combined);
    }
    s
}

pub fn retrieval_table(eval: &RetrievalEval) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8} {:>9}", "k", "quality");
    for (k, q) in &eval.by_k {
        let _ = writeln!(s, "{k:>8} {q:>9.4}");
    }
    let _ = writeln!(s, "{:>8} {:>9.4}", "dense", eval.dense);
    s
}

pub fn interp_table(summary: &RankSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>6} {:>6}", "rank", "count");
    for (i, c) in summary.histogram.iter().enumerate() {
        let _ = writeln!(s, "{:>6} {c:>6}", i + 1);
    }
    let _ = writeln!(s, "mean rank {:.3}", summary.mean_rank);
    s
}
