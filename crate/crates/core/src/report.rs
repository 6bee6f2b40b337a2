//! Line chart of the comparison report, rendered from its CSV alone so the
//! figure can be regenerated from the table.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One curve of the chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads the `column` curve of every scheme from a comparison CSV, in order
/// of first appearance.
pub fn series_from_csv(csv_text: &str, column: &str) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("comparison CSV has no `{name}` column")))
    };
    let (s_col, i_col, v_col) = (find("scheme")?, find("iter")?, find(column)?);
    let mut out: Vec<Series> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |c: usize| {
            record[c].parse::<f64>().map_err(|_| {
                Error::Config(format!("comparison CSV: `{}` is not a number", &record[c]))
            })
        };
        let point = (parse(i_col)?, parse(v_col)?);
        let label = &record[s_col];
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point),
            None => out.push(Series {
                label: label.to_string(),
                points: vec![point],
            }),
        }
    }
    Ok(out)
}

/// SVG chart of the excess-risk curves with a logarithmic y axis.
pub fn render_comparison_svg(csv_text: &str, title: &str) -> Result<String> {
    let series = series_from_csv(csv_text, "excess_risk")?;
    Ok(render_log_chart(&series, title, "iteration", "excess risk"))
}

pub fn render_log_chart(series: &[Series], title: &str, x_label: &str, y_label: &str) -> String {
    let positive = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|p| p.1 > 0.0 && p.1.is_finite())
    };
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let (lo, hi) = positive().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    let (mut d_lo, mut d_hi) = if lo.is_finite() {
        (lo.log10().floor() as i32, hi.log10().ceil() as i32)
    } else {
        (-1, 0)
    };
    if d_hi <= d_lo {
        d_hi = d_lo + 1;
    }
    if d_hi - d_lo > 12 {
        d_lo = d_hi - 12;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + x / x_max * plot_w;
    let sy = |y: f64| {
        let t = (y.log10() - d_lo as f64) / (d_hi - d_lo) as f64;
        TOP + (1.0 - t.clamp(0.0, 1.0)) * plot_h
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );
    for d in d_lo..=d_hi {
        let y = sy(10f64.powi(d));
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            LEFT + plot_w
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.2}" text-anchor="end">1e{d}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for j in 0..=5 {
        let x = x_max * j as f64 / 5.0;
        let px = sx(x);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#333333"/>"##,
            TOP + plot_h,
            TOP + plot_h + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h + 18.0,
            tick_label(x)
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333333"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.1}" text-anchor="middle" transform="rotate(-90 20 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (n, s) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let mut pts = String::new();
        for &(x, y) in s.points.iter().filter(|p| p.1 > 0.0 && p.1.is_finite()) {
            let _ = write!(pts, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#,
            pts.trim_end()
        );
        let ly = TOP + 14.0 + 20.0 * n as f64;
        let lx = LEFT + plot_w + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 24.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick_label(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.1}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "scheme,iter,excess_risk\nnone,0,1.0\nnone,1,0.01\niid,0,1.0\niid,1,0.5\n";

    #[test]
    fn reads_series_in_order() {
        let s = series_from_csv(CSV, "excess_risk").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, "none");
        assert_eq!(s[1].points, vec![(0.0, 1.0), (1.0, 0.5)]);
        assert!(series_from_csv(CSV, "risk").is_err());
    }

    #[test]
    fn renders_one_polyline_per_scheme() {
        let svg = render_comparison_svg(CSV, "a < b").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains(">1e-2<"));
        assert_eq!(svg, render_comparison_svg(CSV, "a < b").unwrap());
    }

    #[test]
    fn nonpositive_values_are_skipped() {
        let svg =
            render_comparison_svg("scheme,iter,excess_risk\nnone,0,0\nnone,1,0.1\n", "t").unwrap();
        assert!(svg.contains("<polyline"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
