//! Text tables and SVG plots for the CSV artifacts.

use std::fmt::Write as _;

use anyhow::{anyhow, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Parses CSV text, skipping `#` comment lines.
pub fn parse_csv(text: &str) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(|e| anyhow!("header: {e}"))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(String::new(), |p| format!(" (line {})", p.line()));
            anyhow!("row {}{line}: {e}", i + 1)
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

/// Left-aligned columns separated by two spaces, with a rule under the header.
pub fn format_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let s: Vec<String> = cells.iter().zip(&w).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&w.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Variant × task matrix of one metric with a per-variant mean column.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub metric: String,
    pub variants: Vec<String>,
    pub tasks: Vec<String>,
    /// `cells[v][t]`; `None` where the CSV has no row.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Grid {
    pub fn from_table(t: &Table, metric: &str) -> Result<Option<Grid>> {
        let col = |name: &str| t.header.iter().position(|h| h == name);
        let (Some(ti), Some(vi), Some(mi)) = (col("task"), col("model_variant"), col(metric)) else {
            return Ok(None);
        };
        let mut variants: Vec<String> = Vec::new();
        let mut tasks: Vec<String> = Vec::new();
        let mut acc: Vec<(usize, usize, f64)> = Vec::new();
        for (r, row) in t.rows.iter().enumerate() {
            let v: f64 = row[mi].parse().map_err(|_| anyhow!("row {}: `{}` is not a number", r + 1, row[mi]))?;
            let idx = |list: &mut Vec<String>, s: &str| {
                list.iter().position(|x| x == s).unwrap_or_else(|| {
                    list.push(s.to_string());
                    list.len() - 1
                })
            };
            let a = idx(&mut variants, &row[vi]);
            let b = idx(&mut tasks, &row[ti]);
            acc.push((a, b, v));
        }
        let mut sums = vec![vec![(0.0, 0usize); tasks.len()]; variants.len()];
        for (a, b, v) in acc {
            sums[a][b].0 += v;
            sums[a][b].1 += 1;
        }
        let cells = sums
            .into_iter()
            .map(|r| r.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
            .collect();
        Ok(Some(Grid { metric: metric.into(), variants, tasks, cells }))
    }

    /// Mean over the tasks a variant has values for.
    pub fn variant_mean(&self, v: usize) -> Option<f64> {
        let vals: Vec<f64> = self.cells[v].iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn format(&self) -> String {
        let mut header = vec![format!("{} \\ task", self.metric)];
        header.extend(self.tasks.iter().cloned());
        header.push("mean".into());
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let rows: Vec<Vec<String>> = self
            .variants
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut r = vec![v.clone()];
                r.extend(self.cells[i].iter().map(|c| fmt(*c)));
                r.push(fmt(self.variant_mean(i)));
                r
            })
            .collect();
        format_table(&header, &rows)
    }
}

/// Full text rendering: the table, plus the ATP grid for metrics files.
pub fn render(text: &str) -> Result<String> {
    let t = parse_csv(text)?;
    let mut out = format_table(&t.header, &t.rows);
    if let Some(g) = Grid::from_table(&t, "atp_mean")? {
        if !g.variants.is_empty() {
            out.push('\n');
            out.push_str(&g.format());
        }
    }
    Ok(out)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(svg: &mut String, y_lo: f64, y_hi: f64, y_label: &str) {
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD / 1.5);
    let _ = writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = y0 - f * (y0 - y1);
        let v = y_lo + f * (y_hi - y_lo);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 4.0, y + 4.0, tick(v));
    }
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// One polyline per numeric column against `x_col`.
pub fn line_plot(t: &Table, x_col: &str, title: &str) -> Result<String> {
    let xi = t.header.iter().position(|h| h == x_col).ok_or_else(|| anyhow!("no `{x_col}` column"))?;
    let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
    let xs: Vec<f64> = t.rows.iter().map(|r| num(&r[xi])).collect::<Option<_>>().ok_or_else(|| anyhow!("non-numeric `{x_col}`"))?;
    let series: Vec<(String, Vec<f64>)> = (0..t.header.len())
        .filter(|&c| c != xi)
        .filter_map(|c| {
            let ys: Option<Vec<f64>> = t.rows.iter().map(|r| num(&r[c])).collect();
            ys.map(|ys| (t.header[c].clone(), ys))
        })
        .collect();
    let all = || series.iter().flat_map(|(_, ys)| ys.iter().copied());
    let (lo, hi) = (all().fold(f64::INFINITY, f64::min).min(0.0), all().fold(f64::NEG_INFINITY, f64::max));
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let (xlo, xhi) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let xspan = if xhi > xlo { xhi - xlo } else { 1.0 };
    let px = |x: f64| PAD + (x - xlo) / xspan * (W - 1.5 * PAD);
    let py = |y: f64| (H - PAD) - (y - lo) / (hi - lo) * (H - PAD - PAD / 1.5);

    let mut svg = svg_open(title);
    axes(&mut svg, lo, hi, "value");
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 16.0, escape(x_col));
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let ly = PAD / 1.5 + 14.0 * i as f64;
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{ly:.1}\" fill=\"{color}\" text-anchor=\"end\">{}</text>", W - PAD / 2.0, escape(name));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Grouped bars: one group per task, one bar per variant.
pub fn bar_plot(g: &Grid, title: &str) -> String {
    let vals = || g.cells.iter().flatten().flatten().copied();
    let hi = vals().fold(0.0f64, f64::max).max(1e-12);
    let lo = vals().fold(0.0f64, f64::min);
    let mut svg = svg_open(title);
    axes(&mut svg, lo, hi, &g.metric);
    let group_w = (W - 1.5 * PAD) / g.tasks.len().max(1) as f64;
    let bar_w = group_w * 0.8 / g.variants.len().max(1) as f64;
    let py = |y: f64| (H - PAD) - (y - lo) / (hi - lo) * (H - PAD - PAD / 1.5);
    for (t, task) in g.tasks.iter().enumerate() {
        let gx = PAD + t as f64 * group_w + group_w * 0.1;
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", gx + group_w * 0.4, H - PAD + 16.0, escape(task));
        for (v, row) in g.cells.iter().enumerate() {
            if let Some(y) = row[t] {
                let (top, base) = (py(y.max(0.0)), py(y.min(0.0)));
                let _ = writeln!(
                    svg,
                    "<rect x=\"{:.2}\" y=\"{top:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                    gx + v as f64 * bar_w,
                    bar_w * 0.9,
                    base - top,
                    COLORS[v % COLORS.len()]
                );
            }
        }
    }
    for (v, name) in g.variants.iter().enumerate() {
        let ly = PAD / 1.5 + 14.0 * v as f64;
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{ly:.1}\" fill=\"{}\" text-anchor=\"end\">{}</text>", W - PAD / 2.0, COLORS[v % COLORS.len()], escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}
