//! Static SVG figures from result tables.
//!
//! Rendering is hand-rolled on purpose: the output must be byte-identical
//! for identical input tables, with no dependency on font metrics or
//! plotting-library versioning. Three figure kinds cover the result
//! shapes: grouped bars (categorical group x categorical series), lines
//! over a numeric axis, and scatter plots. Cells holding several rows per
//! (group, series) pair average them.

use anyhow::{bail, Context, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 78.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 64.0;

const PALETTE: [&str; 8] = [
    "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c", "#dc7ec0", "#797979",
];

/// A parsed results.csv: header plus string cells.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .map(|h| h.split(',').map(str::to_string).collect())
            .unwrap_or_default();
        if header.is_empty() {
            bail!("{}: empty table", path.display());
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                bail!("{}: row {} has {} fields, header has {}", path.display(), i + 2, row.len(), header.len());
            }
            rows.push(row);
        }
        if rows.is_empty() {
            bail!("{}: table has no data rows", path.display());
        }
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("unknown column `{name}` (have: {})", self.header.join(", ")))
    }

    fn number(&self, row: usize, col: usize) -> Result<f64> {
        self.rows[row][col].parse().with_context(|| {
            format!("column `{}` row {}: `{}` is not numeric", self.header[col], row + 2, self.rows[row][col])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Figure {
    /// Grouped bars: one slot per `group` value, one bar per `series`.
    Bars { group: String, series: String, value: String },
    /// One polyline per `series` over the numeric `x` column.
    Lines { x: String, series: String, y: String },
    /// One point per row, colored by the optional `label` column.
    Scatter { x: String, y: String, label: Option<String> },
}

impl Figure {
    /// Parse `kind:col,col[,col]`, e.g. `bars:workload,mode,norm_cycles`.
    pub fn parse(spec: &str) -> Result<Figure> {
        let (kind, rest) = spec
            .split_once(':')
            .with_context(|| format!("figure spec `{spec}` needs the form kind:col,col[,col]"))?;
        let cols: Vec<&str> = rest.split(',').map(str::trim).collect();
        if cols.iter().any(|c| c.is_empty()) {
            bail!("figure spec `{spec}` selects an empty column name");
        }
        match (kind, cols.as_slice()) {
            ("bars", [g, s, v]) => Ok(Figure::Bars {
                group: g.to_string(),
                series: s.to_string(),
                value: v.to_string(),
            }),
            ("lines", [x, s, y]) => Ok(Figure::Lines {
                x: x.to_string(),
                series: s.to_string(),
                y: y.to_string(),
            }),
            ("scatter", [x, y]) => {
                Ok(Figure::Scatter { x: x.to_string(), y: y.to_string(), label: None })
            }
            ("scatter", [x, y, l]) => Ok(Figure::Scatter {
                x: x.to_string(),
                y: y.to_string(),
                label: Some(l.to_string()),
            }),
            ("bars" | "lines" | "scatter", _) => {
                bail!("figure spec `{spec}` has the wrong number of columns")
            }
            _ => bail!("unknown figure kind `{kind}` (bars|lines|scatter)"),
        }
    }

    pub fn filename(&self) -> String {
        let parts: Vec<&str> = match self {
            Figure::Bars { group, series, value } => vec!["bars", group, series, value],
            Figure::Lines { x, series, y } => vec!["lines", x, series, y],
            Figure::Scatter { x, y, label } => match label {
                Some(l) => vec!["scatter", x, y, l],
                None => vec!["scatter", x, y],
            },
        };
        let mut name = parts.join("_");
        name.retain(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        name + ".svg"
    }

    pub fn render(&self, t: &Table) -> Result<String> {
        match self {
            Figure::Bars { group, series, value } => render_bars(t, group, series, value),
            Figure::Lines { x, series, y } => render_lines(t, x, series, y),
            Figure::Scatter { x, y, label } => render_scatter(t, x, y, label.as_deref()),
        }
    }
}

/// The standard set rendered by `--emit-plots`.
pub fn default_figures() -> Vec<Figure> {
    vec![
        Figure::Bars {
            group: "workload".into(),
            series: "mode".into(),
            value: "norm_cycles".into(),
        },
        Figure::Lines { x: "vcpus".into(), series: "mode".into(), y: "norm_cycles".into() },
        Figure::Scatter {
            x: "norm_cycles".into(),
            y: "norm_energy".into(),
            label: Some("mode".into()),
        },
    ]
}

pub fn render_all(csv: &Path, figures: &[Figure], out: &Path) -> Result<Vec<PathBuf>> {
    let table = Table::read(csv)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for fig in figures {
        let svg = fig.render(&table)?;
        let path = out.join(fig.filename());
        fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

/// Distinct values in first-appearance order (the table's order is
/// deterministic, so the figure is too).
fn distinct(t: &Table, col: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for row in &t.rows {
        if !out.contains(&row[col]) {
            out.push(row[col].clone());
        }
    }
    out
}

/// Trim a value for axis/legend text: up to four decimals, no trailing
/// zeros.
fn fmt(v: f64) -> String {
    let mut s = format!("{v:.4}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A 1-2-5 tick step covering `max` in at most five intervals.
fn tick_step(max: f64) -> f64 {
    let raw = (max / 5.0).max(f64::MIN_POSITIVE);
    let mag = 10f64.powf(raw.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if mag * m >= raw {
            return mag * m;
        }
    }
    mag * 10.0
}

struct Canvas {
    svg: String,
    /// Y-axis value at the top of the plot area.
    y_max: f64,
}

impl Canvas {
    /// Frame, horizontal gridlines, tick labels and titles; the y axis
    /// always starts at zero so areas stay comparable across figures.
    fn new(title: &str, y_name: &str, y_data_max: f64) -> Canvas {
        let step = tick_step(if y_data_max > 0.0 { y_data_max } else { 1.0 });
        let y_max = step * (if y_data_max > 0.0 { y_data_max } else { 1.0 } / step).ceil().max(1.0);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
            MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
            esc(title)
        );
        let mut c = Canvas { svg, y_max };
        let mut v = 0.0;
        while v <= y_max + step * 1e-9 {
            let y = c.y_px(v);
            let _ = writeln!(
                c.svg,
                r##"<line x1="{MARGIN_L}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
                WIDTH - MARGIN_R
            );
            let _ = writeln!(
                c.svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
                MARGIN_L - 6.0,
                y + 4.0,
                fmt(v)
            );
            v += step;
        }
        let _ = writeln!(
            c.svg,
            r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0,
            MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0,
            esc(y_name)
        );
        c
    }

    fn plot_w(&self) -> f64 {
        WIDTH - MARGIN_L - MARGIN_R
    }

    fn y_px(&self, v: f64) -> f64 {
        let h = HEIGHT - MARGIN_T - MARGIN_B;
        HEIGHT - MARGIN_B - v / self.y_max * h
    }

    fn x_label(&mut self, x: f64, label: &str) {
        let _ = writeln!(
            self.svg,
            r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN_B + 18.0,
            esc(label)
        );
    }

    fn x_axis_name(&mut self, name: &str) {
        let _ = writeln!(
            self.svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            MARGIN_L + self.plot_w() / 2.0,
            HEIGHT - 16.0,
            esc(name)
        );
    }

    fn legend(&mut self, entries: &[String]) {
        for (i, name) in entries.iter().enumerate() {
            let y = MARGIN_T + 10.0 + i as f64 * 20.0;
            let _ = writeln!(
                self.svg,
                r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{}"/>"#,
                WIDTH - MARGIN_R + 16.0,
                y,
                PALETTE[i % PALETTE.len()]
            );
            let _ = writeln!(
                self.svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#,
                WIDTH - MARGIN_R + 34.0,
                y + 10.0,
                esc(name)
            );
        }
    }

    fn finish(mut self) -> String {
        let _ = writeln!(
            self.svg,
            r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{:.1}" height="{:.1}" fill="none" stroke="#333333"/>"##,
            self.plot_w(),
            HEIGHT - MARGIN_T - MARGIN_B
        );
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

/// Mean of `value` over rows matching each (group, series) pair; `None`
/// when a pair has no rows.
fn aggregate(
    t: &Table,
    groups: &[String],
    gcol: usize,
    series: &[String],
    scol: usize,
    vcol: usize,
) -> Result<Vec<Vec<Option<f64>>>> {
    let mut sums = vec![vec![(0.0, 0u64); series.len()]; groups.len()];
    for (ri, row) in t.rows.iter().enumerate() {
        let gi = groups.iter().position(|g| *g == row[gcol]).expect("groups cover all rows");
        let si = series.iter().position(|s| *s == row[scol]).expect("series cover all rows");
        let v = t.number(ri, vcol)?;
        sums[gi][si].0 += v;
        sums[gi][si].1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
        .collect())
}

fn render_bars(t: &Table, group: &str, series: &str, value: &str) -> Result<String> {
    let (gcol, scol, vcol) = (t.col(group)?, t.col(series)?, t.col(value)?);
    let groups = distinct(t, gcol);
    let series_names = distinct(t, scol);
    let cells = aggregate(t, &groups, gcol, &series_names, scol, vcol)?;
    let y_data_max =
        cells.iter().flatten().flatten().fold(0.0f64, |m, &v| m.max(v));

    let mut c = Canvas::new(&format!("{value} by {group} and {series}"), value, y_data_max);
    let slot_w = c.plot_w() / groups.len() as f64;
    let bar_w = slot_w * 0.8 / series_names.len() as f64;
    for (gi, g) in groups.iter().enumerate() {
        let x0 = MARGIN_L + gi as f64 * slot_w + slot_w * 0.1;
        for (si, cell) in cells[gi].iter().enumerate() {
            let Some(v) = *cell else { continue };
            let x = x0 + si as f64 * bar_w;
            let y = c.y_px(v);
            let h = HEIGHT - MARGIN_B - y;
            let _ = writeln!(
                c.svg,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{}</title></rect>"#,
                bar_w * 0.92,
                PALETTE[si % PALETTE.len()],
                fmt(v)
            );
        }
        c.x_label(MARGIN_L + (gi as f64 + 0.5) * slot_w, g);
    }
    c.x_axis_name(group);
    c.legend(&series_names);
    Ok(c.finish())
}

fn render_lines(t: &Table, x: &str, series: &str, y: &str) -> Result<String> {
    let (xcol, scol, ycol) = (t.col(x)?, t.col(series)?, t.col(y)?);
    let mut xs: Vec<f64> = Vec::new();
    for ri in 0..t.rows.len() {
        let v = t.number(ri, xcol)?;
        if !xs.contains(&v) {
            xs.push(v);
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite axis values"));
    let x_labels: Vec<String> = xs.iter().map(|&v| fmt(v)).collect();
    let series_names = distinct(t, scol);
    // Aggregate on the formatted x value so floats group exactly.
    let mut t2 = Table { header: t.header.clone(), rows: t.rows.clone() };
    for row in &mut t2.rows {
        row[xcol] = fmt(row[xcol].parse::<f64>().expect("checked numeric above"));
    }
    let cells = aggregate(&t2, &x_labels, xcol, &series_names, scol, ycol)?;
    let y_data_max = cells.iter().flatten().flatten().fold(0.0f64, |m, &v| m.max(v));

    let mut c = Canvas::new(&format!("{y} over {x} by {series}"), y, y_data_max);
    let span = (xs[xs.len() - 1] - xs[0]).max(1e-9);
    let (x_lo, plot_w) = (xs[0], c.plot_w());
    let x_px = move |v: f64| MARGIN_L + (v - x_lo) / span * plot_w;
    for (si, _) in series_names.iter().enumerate() {
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .enumerate()
            .filter_map(|(xi, &xv)| cells[xi][si].map(|v| (x_px(xv), c.y_px(v))))
            .collect();
        if pts.len() > 1 {
            let path: Vec<String> =
                pts.iter().map(|(px, py)| format!("{px:.1},{py:.1}")).collect();
            let _ = writeln!(
                c.svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                path.join(" "),
                PALETTE[si % PALETTE.len()]
            );
        }
        for (px, py) in pts {
            let _ = writeln!(
                c.svg,
                r#"<circle cx="{px:.1}" cy="{py:.1}" r="3.5" fill="{}"/>"#,
                PALETTE[si % PALETTE.len()]
            );
        }
    }
    for (&xv, label) in xs.iter().zip(&x_labels) {
        c.x_label(x_px(xv), label);
    }
    c.x_axis_name(x);
    c.legend(&series_names);
    Ok(c.finish())
}

fn render_scatter(t: &Table, x: &str, y: &str, label: Option<&str>) -> Result<String> {
    let (xcol, ycol) = (t.col(x)?, t.col(y)?);
    let lcol = label.map(|l| t.col(l)).transpose()?;
    let labels = lcol.map(|c| distinct(t, c)).unwrap_or_default();
    let mut x_max = 0.0f64;
    let mut y_max = 0.0f64;
    let mut pts = Vec::with_capacity(t.rows.len());
    for ri in 0..t.rows.len() {
        let xv = t.number(ri, xcol)?;
        let yv = t.number(ri, ycol)?;
        let li = lcol.map_or(0, |c| {
            labels.iter().position(|l| *l == t.rows[ri][c]).expect("labels cover all rows")
        });
        x_max = x_max.max(xv);
        y_max = y_max.max(yv);
        pts.push((xv, yv, li));
    }

    let mut c = Canvas::new(&format!("{y} vs {x}"), y, y_max);
    let x_top = {
        let step = tick_step(if x_max > 0.0 { x_max } else { 1.0 });
        step * (if x_max > 0.0 { x_max } else { 1.0 } / step).ceil().max(1.0)
    };
    let plot_w = c.plot_w();
    let x_px = move |v: f64| MARGIN_L + v / x_top * plot_w;
    for i in 0..=5 {
        let v = x_top * i as f64 / 5.0;
        c.x_label(x_px(v), &fmt(v));
    }
    for (xv, yv, li) in pts {
        let _ = writeln!(
            c.svg,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}" fill-opacity="0.75"/>"#,
            x_px(xv),
            c.y_px(yv),
            PALETTE[li % PALETTE.len()]
        );
    }
    c.x_axis_name(x);
    if !labels.is_empty() {
        c.legend(&labels);
    }
    Ok(c.finish())
}
