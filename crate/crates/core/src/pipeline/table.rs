//! Result tables: rows are (pair, template), columns are models.
//!
//! Markers, computed per pair from the table's own values:
//!
//! * bold: the best value in the pair, exactly one cell
//! * `*`: the best zero-shot value in the pair
//! * underline: the best in-context value in the pair
//! * `†`: the paired t-test is not significant (p > 0.05)
//!
//! Ties go to the first cell in row-major order. Missing cells print as `—`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::LangPair;
use crate::metrics::{CorrelationReport, Significance};
use crate::prompts::TemplateId;

pub const MISSING: &str = "—";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    R,
    Rho,
    Tau,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::R, Metric::Rho, Metric::Tau];

    pub fn value(self, report: &CorrelationReport) -> Option<f64> {
        match self {
            Metric::R => report.pearson_r,
            Metric::Rho => report.spearman_rho,
            Metric::Tau => report.kendall_tau,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Metric::R => "r",
            Metric::Rho => "rho",
            Metric::Tau => "tau",
        }
    }

    fn latex(self) -> &'static str {
        match self {
            Metric::R => "$r$",
            Metric::Rho => "$\\rho$",
            Metric::Tau => "$\\tau$",
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r" | "pearson" => Ok(Metric::R),
            "rho" | "spearman" => Ok(Metric::Rho),
            "tau" | "kendall" => Ok(Metric::Tau),
            _ => Err(format!("unknown metric `{s}` (expected r, rho or tau)")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Text,
    Tsv,
    Latex,
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(TableFormat::Text),
            "tsv" => Ok(TableFormat::Tsv),
            "latex" | "tex" => Ok(TableFormat::Latex),
            _ => Err(format!("unknown table format `{s}` (expected text, tsv or latex)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Markers {
    pub bold: bool,
    pub best_zero_shot: bool,
    pub underline: bool,
    pub dagger: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub value: Option<f64>,
    pub markers: Markers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub pair: LangPair,
    pub template: TemplateId,
    /// One entry per model; `None` when the run has no report for it.
    pub cells: Vec<Option<TableCell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub metric: Metric,
    pub models: Vec<String>,
    pub rows: Vec<TableRow>,
}

type Index<'a> = BTreeMap<(String, TemplateId, &'a str), &'a CorrelationReport>;

struct Layout<'a> {
    models: Vec<String>,
    /// Pairs in display order with their templates.
    keys: Vec<(LangPair, Vec<TemplateId>)>,
    index: Index<'a>,
}

fn layout(reports: &[CorrelationReport]) -> Layout<'_> {
    let models: BTreeSet<&str> = reports.iter().map(|r| r.model.as_str()).collect();
    let mut pairs: BTreeMap<String, (LangPair, BTreeSet<TemplateId>)> = BTreeMap::new();
    let mut index = Index::new();
    for r in reports {
        let key = r.pair.to_string();
        pairs
            .entry(key.clone())
            .or_insert_with(|| (r.pair.clone(), BTreeSet::new()))
            .1
            .insert(r.template);
        if index.insert((key, r.template, r.model.as_str()), r).is_some() {
            log::warn!("duplicate report for {} {} {}; keeping the last", r.pair, r.template, r.model);
        }
    }
    let order = |t: &TemplateId| TemplateId::ALL.iter().position(|x| x == t).unwrap_or(usize::MAX);
    Layout {
        models: models.into_iter().map(str::to_owned).collect(),
        keys: pairs
            .into_values()
            .map(|(pair, ts)| {
                let mut ts: Vec<TemplateId> = ts.into_iter().collect();
                ts.sort_by_key(order);
                (pair, ts)
            })
            .collect(),
        index,
    }
}

/// Index of the strictly largest value among `candidates`, first on ties.
fn argmax(candidates: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in candidates {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn build_from(layout: &Layout<'_>, metric: Metric) -> ResultTable {
    let mut rows = Vec::new();
    for (pair, templates) in &layout.keys {
        let start = rows.len();
        for &template in templates {
            let cells = layout
                .models
                .iter()
                .map(|m| {
                    layout.index.get(&(pair.to_string(), template, m.as_str())).map(|r| TableCell {
                        value: metric.value(r),
                        markers: Markers {
                            dagger: r.significance == Significance::NS,
                            ..Markers::default()
                        },
                    })
                })
                .collect();
            rows.push(TableRow {
                pair: pair.clone(),
                template,
                cells,
            });
        }
        // Flattened (row, column) positions of this pair's cells.
        let width = layout.models.len();
        let group = &mut rows[start..];
        let values: Vec<(usize, bool, f64)> = group
            .iter()
            .enumerate()
            .flat_map(|(ri, row)| {
                row.cells.iter().enumerate().filter_map(move |(ci, c)| {
                    let v = c.as_ref()?.value?;
                    Some((ri * width + ci, row.template.is_icl(), v))
                })
            })
            .collect();
        let pick = |filter: &dyn Fn(bool) -> bool| {
            argmax(values.iter().filter(|(_, icl, _)| filter(*icl)).map(|&(pos, _, v)| (pos, v)))
        };
        let mut mark = |pos: Option<usize>, set: fn(&mut Markers)| {
            if let Some(pos) = pos {
                let cell = group[pos / width].cells[pos % width].as_mut().expect("marked cell exists");
                set(&mut cell.markers);
            }
        };
        mark(pick(&|_| true), |m| m.bold = true);
        mark(pick(&|icl| !icl), |m| m.best_zero_shot = true);
        mark(pick(&|icl| icl), |m| m.underline = true);
    }
    ResultTable {
        metric,
        models: layout.models.clone(),
        rows,
    }
}

/// Builds the marked table for one metric.
pub fn build_table(reports: &[CorrelationReport], metric: Metric) -> ResultTable {
    build_from(&layout(reports), metric)
}

fn plain_cell(cell: Option<&TableCell>) -> String {
    let Some(cell) = cell else { return MISSING.into() };
    let Some(v) = cell.value else { return MISSING.into() };
    let mut s = format!("{v:.3}");
    if cell.markers.underline {
        s = format!("_{s}_");
    }
    if cell.markers.bold {
        s = format!("**{s}**");
    }
    if cell.markers.best_zero_shot {
        s.push('*');
    }
    if cell.markers.dagger {
        s.push('†');
    }
    s
}

fn latex_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\textbackslash{}"),
            '&' | '%' | '$' | '#' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            '~' => out.push_str("\\textasciitilde{}"),
            '^' => out.push_str("\\textasciicircum{}"),
            _ => out.push(c),
        }
    }
    out
}

fn latex_cell(cell: Option<&TableCell>) -> String {
    let Some(cell) = cell else { return MISSING.into() };
    let Some(v) = cell.value else { return MISSING.into() };
    let mut s = format!("{v:.3}");
    if cell.markers.underline {
        s = format!("\\underline{{{s}}}");
    }
    if cell.markers.bold {
        s = format!("\\textbf{{{s}}}");
    }
    let mut sup = String::new();
    if cell.markers.best_zero_shot {
        sup.push('*');
    }
    if cell.markers.dagger {
        sup.push_str("\\dagger");
    }
    if !sup.is_empty() {
        s.push_str(&format!("$^{{{sup}}}$"));
    }
    s
}

fn align(grid: &[Vec<String>]) -> String {
    let cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in grid {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            line.extend(std::iter::repeat_n(' ', widths[c] - cell.chars().count()));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

const LEGEND: &str =
    "**x** best in pair; _x_ best in-context in pair; * best zero-shot in pair; † not significant (p > 0.05)";

/// Renders one metric's table.
pub fn render_table(reports: &[CorrelationReport], metric: Metric, format: TableFormat) -> String {
    let table = build_table(reports, metric);
    let mut header = vec!["pair".to_owned(), "template".to_owned()];
    header.extend(table.models.iter().map(|m| format!("{m} {metric}")));
    match format {
        TableFormat::Text | TableFormat::Tsv => {
            let mut grid = vec![header];
            for row in &table.rows {
                let mut line = vec![row.pair.to_string(), row.template.label().to_owned()];
                line.extend(row.cells.iter().map(|c| plain_cell(c.as_ref())));
                grid.push(line);
            }
            if format == TableFormat::Tsv {
                grid.iter().map(|r| r.join("\t") + "\n").collect()
            } else {
                align(&grid) + "\n" + LEGEND + "\n"
            }
        }
        TableFormat::Latex => {
            let mut out = String::new();
            let _ = writeln!(out, "\\begin{{tabular}}{{ll{}}}", "r".repeat(table.models.len()));
            let _ = writeln!(out, "\\hline");
            let mut head = vec!["Pair".to_owned(), "Template".to_owned()];
            head.extend(table.models.iter().map(|m| format!("{} {}", latex_escape(m), metric.latex())));
            let _ = writeln!(out, "{} \\\\", head.join(" & "));
            let _ = writeln!(out, "\\hline");
            for row in &table.rows {
                let mut line = vec![row.pair.to_string(), row.template.label().to_owned()];
                line.extend(row.cells.iter().map(|c| latex_cell(c.as_ref())));
                let _ = writeln!(out, "{} \\\\", line.join(" & "));
            }
            let _ = writeln!(out, "\\hline");
            let _ = writeln!(out, "\\end{{tabular}}");
            out
        }
    }
}

fn exclusion_cell(report: Option<&CorrelationReport>) -> String {
    match report {
        None => MISSING.into(),
        Some(r) if r.flagged_untrustworthy => format!("{} (*)", r.n_excluded),
        Some(r) => r.n_excluded.to_string(),
    }
}

/// All three coefficients plus the exclusion count per model. `(*)` after
/// E marks cells where more than 10% of outputs were dropped.
pub fn render_appendix(reports: &[CorrelationReport], format: TableFormat) -> String {
    let layout = layout(reports);
    let tables: Vec<ResultTable> = Metric::ALL.iter().map(|&m| build_from(&layout, m)).collect();
    let latex = format == TableFormat::Latex;
    let cell_text = |c: Option<&TableCell>| if latex { latex_cell(c) } else { plain_cell(c) };

    let mut header = vec![
        if latex { "Pair" } else { "pair" }.to_owned(),
        if latex { "Template" } else { "template" }.to_owned(),
    ];
    for m in &layout.models {
        let m = if latex { latex_escape(m) } else { m.clone() };
        for metric in Metric::ALL {
            header.push(format!("{m} {}", if latex { metric.latex() } else { metric.symbol() }));
        }
        header.push(format!("{m} E"));
    }
    let mut grid = vec![header];
    for (ri, row) in tables[0].rows.iter().enumerate() {
        let mut line = vec![row.pair.to_string(), row.template.label().to_owned()];
        for (ci, model) in layout.models.iter().enumerate() {
            for t in &tables {
                line.push(cell_text(t.rows[ri].cells[ci].as_ref()));
            }
            let report = layout.index.get(&(row.pair.to_string(), row.template, model.as_str())).copied();
            line.push(exclusion_cell(report));
        }
        grid.push(line);
    }
    match format {
        TableFormat::Text => align(&grid) + "\n" + LEGEND + "; E (*) more than 10% excluded\n",
        TableFormat::Tsv => grid.iter().map(|r| r.join("\t") + "\n").collect(),
        TableFormat::Latex => {
            let mut out = String::new();
            let cols = grid[0].len() - 2;
            let _ = writeln!(out, "\\begin{{tabular}}{{ll{}}}", "r".repeat(cols));
            let _ = writeln!(out, "\\hline");
            for (i, line) in grid.iter().enumerate() {
                let _ = writeln!(out, "{} \\\\", line.join(" & "));
                if i == 0 {
                    let _ = writeln!(out, "\\hline");
                }
            }
            let _ = writeln!(out, "\\hline");
            let _ = writeln!(out, "\\end{{tabular}}");
            out
        }
    }
}
