//! Validator quality: selected-accuracy tables, average ranks, weighted
//! rank correlation with the oracle, gaps to the oracle and cell classes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::datapack::OracleMetric;
use crate::error::{Error, Result};
use crate::numerics::average_ranks;
use crate::scoring::ScoreTable;
use crate::selection::{combine_batches, BatchWeighting, OracleTable, SelectionRow, ORACLE_VALIDATOR, SOURCE_ONLY_ROW};

pub const DEFAULT_WEIGHT_EXPONENT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellClass {
    Green,
    Red,
    DarkRed,
}

impl CellClass {
    pub fn as_str(self) -> &'static str {
        match self {
            CellClass::Green => "green",
            CellClass::Red => "red",
            CellClass::DarkRed => "dark-red",
        }
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Colour of a table cell relative to the source-only baseline. For
/// lower-better metrics the thresholds mirror: beating means a smaller
/// value, failing badly means more than twice the baseline.
pub fn classify_cell(value: f64, baseline: f64, lower_better: bool) -> CellClass {
    if lower_better {
        if value < baseline {
            CellClass::Green
        } else if value > 2.0 * baseline {
            CellClass::DarkRed
        } else {
            CellClass::Red
        }
    } else if value > baseline {
        CellClass::Green
    } else if value < baseline / 2.0 {
        CellClass::DarkRed
    } else {
        CellClass::Red
    }
}

/// How far the selected model falls short of the oracle's.
pub fn gap_to_oracle(selected: f64, oracle: f64, lower_better: bool) -> Result<f64> {
    let gap = if lower_better {
        selected - oracle
    } else {
        oracle - selected
    };
    if gap < 0.0 {
        return Err(Error::Selection(format!(
            "selected value {selected} beats the oracle {oracle}; the two come from different pools"
        )));
    }
    Ok(gap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapStats {
    pub mean: f64,
    pub max: f64,
}

pub fn gap_stats(gaps: &[f64]) -> Result<GapStats> {
    if gaps.is_empty() {
        return Err(Error::invalid("no gaps to aggregate"));
    }
    Ok(GapStats {
        mean: gaps.iter().sum::<f64>() / gaps.len() as f64,
        max: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Weighted Pearson correlation of the average ranks of `scores` and
/// `oracle`, with weights `minmax(oracle)^exponent`.
pub fn weighted_spearman(scores: &[f64], oracle: &[f64], exponent: f64) -> Result<f64> {
    if scores.len() != oracle.len() {
        return Err(Error::Shape(format!(
            "{} scores against {} oracle values",
            scores.len(),
            oracle.len()
        )));
    }
    if scores.len() < 3 {
        return Err(Error::invalid("rank correlation needs at least 3 points"));
    }
    if !exponent.is_finite() || exponent < 0.0 {
        return Err(Error::invalid(format!("weight exponent must be >= 0, got {exponent}")));
    }
    let rx = average_ranks(scores)?;
    let ry = average_ranks(oracle)?;
    let lo = oracle.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = oracle
        .iter()
        .map(|o| {
            let u = if hi > lo { (o - lo) / (hi - lo) } else { 1.0 };
            u.powf(exponent)
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("zero total weight"));
    }
    let mean = |r: &[f64]| r.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / total;
    let (mx, my) = (mean(&rx), mean(&ry));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..rx.len() {
        let (dx, dy) = (rx[i] - mx, ry[i] - my);
        sxy += w[i] * dx * dy;
        sxx += w[i] * dx * dx;
        syy += w[i] * dy * dy;
    }
    let floor = 1e-12 * total * (rx.len() * rx.len()) as f64;
    if sxx <= floor || syy <= floor {
        return Err(Error::undefined("constant ranks under the weights"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean rank of each column over rows; rank 1 is the best value of a row
/// (the largest, or the smallest when `lower_better`). Ties share ranks.
pub fn average_rank_table(rows: &[Vec<f64>], lower_better: bool) -> Result<Vec<f64>> {
    let width = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("no rows to rank"))?;
    let mut sum = vec![0.0; width];
    for row in rows {
        if row.len() != width {
            return Err(Error::missing(format!(
                "cells: row of {} where {width} expected",
                row.len()
            )));
        }
        let keyed: Vec<f64> = row.iter().map(|v| if lower_better { *v } else { -v }).collect();
        for (s, r) in sum.iter_mut().zip(average_ranks(&keyed)?) {
            *s += r;
        }
    }
    Ok(sum.into_iter().map(|s| s / rows.len() as f64).collect())
}

/// One labelled row of a result table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub name: String,
    pub values: Vec<Option<f64>>,
    pub oracle: Option<f64>,
}

/// Selected values per algorithm row and validator column.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub validators: Vec<String>,
    pub rows: Vec<ResultRow>,
    pub source_only: Option<ResultRow>,
    pub baseline: f64,
    pub lower_better: bool,
}

fn mean_opt(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in values {
        s += v?;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl ResultTable {
    pub fn check(&self) -> Result<()> {
        let w = self.validators.len();
        for r in self.rows.iter().chain(&self.source_only) {
            if r.values.len() != w {
                return Err(Error::Shape(format!(
                    "row {} has {} cells for {w} validators",
                    r.name,
                    r.values.len()
                )));
            }
        }
        Ok(())
    }

    /// Column means over the algorithm rows; a column with a missing cell
    /// has no mean.
    pub fn average(&self) -> ResultRow {
        ResultRow {
            name: "Avg.".into(),
            values: (0..self.validators.len())
                .map(|j| mean_opt(self.rows.iter().map(|r| r.values[j])))
                .collect(),
            oracle: mean_opt(self.rows.iter().map(|r| r.oracle)),
        }
    }

    /// Average rank per validator. A missing cell ranks below every present
    /// one in its row.
    pub fn average_ranks(&self) -> Result<Vec<f64>> {
        let worst = if self.lower_better { f64::MAX } else { f64::MIN };
        let rows: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| r.values.iter().map(|v| v.unwrap_or(worst)).collect())
            .collect();
        average_rank_table(&rows, self.lower_better)
    }

    pub fn classify(&self, value: f64) -> CellClass {
        classify_cell(value, self.baseline, self.lower_better)
    }
}

/// Everything analysis needs from one task (one source->target pair).
#[derive(Debug, Clone)]
pub struct TaskResults {
    pub task: String,
    pub selections: Vec<SelectionRow>,
    pub scores: ScoreTable,
    pub oracle: OracleTable,
    pub baseline: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub weight_exponent: f64,
    pub pooled: bool,
    pub weighting: BatchWeighting,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            weight_exponent: DEFAULT_WEIGHT_EXPONENT,
            pooled: false,
            weighting: BatchWeighting::Unweighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub validator: String,
    pub task: String,
    pub rho_weighted: Option<f64>,
    pub rho_unweighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub table: ResultTable,
    pub avg: ResultRow,
    pub avg_rank: Vec<f64>,
    /// Mean over tasks of the per-task weighted correlation.
    pub correlation: Vec<Option<f64>>,
    pub pooled_correlation: Option<Vec<Option<f64>>>,
    pub mean_gap: Vec<Option<f64>>,
    pub max_gap: Vec<Option<f64>>,
    pub correlations: Vec<CorrelationRow>,
    pub weight_exponent: f64,
    pub tasks: usize,
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

/// (selected, oracle) for one pool and validator in one task, combining
/// batches in episodic runs.
fn task_cell(rows: &[&SelectionRow], weighting: BatchWeighting) -> Result<(Option<f64>, f64)> {
    let oracle = combine_batches(
        &rows.iter().map(|r| (r.oracle_value, r.rows)).collect::<Vec<_>>(),
        weighting,
    )?;
    let selected = rows
        .iter()
        .map(|r| r.value.map(|v| (v, r.rows)))
        .collect::<Option<Vec<_>>>()
        .map(|v| combine_batches(&v, weighting))
        .transpose()?;
    Ok((selected, oracle))
}

fn correlation_pairs(scores: &ScoreTable, oracle: &OracleTable, validator: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut s = Vec::new();
    let mut o = Vec::new();
    for r in scores.rows.iter().filter(|r| r.validator == validator) {
        if let Some(v) = r.oriented {
            let truth = oracle
                .values
                .get(&r.checkpoint)
                .ok_or_else(|| Error::missing(format!("oracle value of {}", r.checkpoint)))?;
            s.push(v);
            o.push(oracle.oriented(*truth));
        }
    }
    Ok((s, o))
}

fn rho(s: &[f64], o: &[f64], exponent: f64) -> Result<Option<f64>> {
    if s.len() < 3 {
        return Ok(None);
    }
    match weighted_spearman(s, o, exponent) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// (selected, oracle) of one pool and column in one task.
type TaskCell = (Option<f64>, f64);

/// Builds the report from per-task selections, scores and oracle values.
pub fn analyze(tasks: &[TaskResults], opts: AnalysisOptions) -> Result<AnalysisReport> {
    if tasks.is_empty() {
        return Err(Error::invalid("no tasks to analyse"));
    }
    let metric = tasks[0].oracle.metric;
    if tasks.iter().any(|t| t.oracle.metric != metric) {
        return Err(Error::invalid("tasks mix accuracy and MSE oracles"));
    }
    let lower_better = metric == OracleMetric::Mse;

    let mut pools: Vec<String> = Vec::new();
    let mut validators: Vec<String> = Vec::new();
    for t in tasks {
        for r in &t.selections {
            push_unique(&mut pools, &r.pool);
            if r.validator != ORACLE_VALIDATOR {
                push_unique(&mut validators, &r.validator);
            }
        }
    }
    let columns: Vec<&str> = validators
        .iter()
        .map(String::as_str)
        .chain([ORACLE_VALIDATOR])
        .collect();

    let mut cells: BTreeMap<(String, String), Vec<TaskCell>> = BTreeMap::new();
    for t in tasks {
        let mut grouped: BTreeMap<(&str, &str), Vec<&SelectionRow>> = BTreeMap::new();
        for r in &t.selections {
            grouped
                .entry((r.pool.as_str(), r.validator.as_str()))
                .or_default()
                .push(r);
        }
        for pool in &pools {
            for col in &columns {
                let rows = grouped.get(&(pool.as_str(), *col)).ok_or_else(|| {
                    Error::missing(format!("selection for pool {pool}, validator {col} in task {}", t.task))
                })?;
                cells
                    .entry((pool.clone(), col.to_string()))
                    .or_default()
                    .push(task_cell(rows, opts.weighting)?);
            }
        }
    }

    let row_of = |pool: &str| ResultRow {
        name: pool.to_string(),
        values: validators
            .iter()
            .map(|v| mean_opt(cells[&(pool.to_string(), v.clone())].iter().map(|c| c.0)))
            .collect(),
        oracle: mean_opt(
            cells[&(pool.to_string(), ORACLE_VALIDATOR.to_string())]
                .iter()
                .map(|c| c.0),
        ),
    };
    let rows: Vec<ResultRow> = pools
        .iter()
        .filter(|p| *p != SOURCE_ONLY_ROW)
        .map(|p| row_of(p))
        .collect();
    if rows.is_empty() {
        return Err(Error::missing("algorithm rows in the selections"));
    }
    let source_only = pools
        .iter()
        .any(|p| p == SOURCE_ONLY_ROW)
        .then(|| row_of(SOURCE_ONLY_ROW));
    let table = ResultTable {
        validators: validators.clone(),
        rows,
        source_only,
        baseline: tasks.iter().map(|t| t.baseline).sum::<f64>() / tasks.len() as f64,
        lower_better,
    };

    let mut mean_gap = Vec::new();
    let mut max_gap = Vec::new();
    for v in &validators {
        let mut gaps = Vec::new();
        for pool in pools.iter().filter(|p| *p != SOURCE_ONLY_ROW) {
            for (sel, orc) in &cells[&(pool.clone(), v.clone())] {
                if let Some(s) = sel {
                    gaps.push(gap_to_oracle(*s, *orc, lower_better)?);
                }
            }
        }
        let stats = (!gaps.is_empty()).then(|| gap_stats(&gaps)).transpose()?;
        mean_gap.push(stats.map(|g| g.mean));
        max_gap.push(stats.map(|g| g.max));
    }

    let mut correlations = Vec::new();
    let mut correlation = Vec::new();
    let mut pooled = Vec::new();
    for v in &validators {
        let mut per_task = Vec::new();
        let (mut all_s, mut all_o) = (Vec::new(), Vec::new());
        for t in tasks {
            let (s, o) = correlation_pairs(&t.scores, &t.oracle, v)?;
            let w = rho(&s, &o, opts.weight_exponent)?;
            correlations.push(CorrelationRow {
                validator: v.clone(),
                task: t.task.clone(),
                rho_weighted: w,
                rho_unweighted: rho(&s, &o, 0.0)?,
            });
            per_task.push(w);
            all_s.extend(s);
            all_o.extend(o);
        }
        let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        correlation.push(mean);
        correlations.push(CorrelationRow {
            validator: v.clone(),
            task: "mean".into(),
            rho_weighted: mean,
            rho_unweighted: mean_opt_defined(
                &correlations
                    .iter()
                    .filter(|c| c.validator == *v && c.task != "mean")
                    .map(|c| c.rho_unweighted)
                    .collect::<Vec<_>>(),
            ),
        });
        if opts.pooled {
            let p = CorrelationRow {
                validator: v.clone(),
                task: "pooled".into(),
                rho_weighted: rho(&all_s, &all_o, opts.weight_exponent)?,
                rho_unweighted: rho(&all_s, &all_o, 0.0)?,
            };
            pooled.push(p.rho_weighted);
            correlations.push(p);
        }
    }

    Ok(AnalysisReport {
        avg: table.average(),
        avg_rank: table.average_ranks()?,
        table,
        correlation,
        pooled_correlation: opts.pooled.then_some(pooled),
        mean_gap,
        max_gap,
        correlations,
        weight_exponent: opts.weight_exponent,
        tasks: tasks.len(),
    })
}

fn mean_opt_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::invalid(format!("unknown report format {other:?}"))),
        }
    }
}

fn two_places(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

enum Cell {
    Value(Option<f64>),
    Classified(Option<f64>),
    Blank,
}

impl AnalysisReport {
    /// Rows of the rendered table: label, one cell per validator, Oracle.
    fn grid(&self) -> Vec<(String, Vec<Cell>)> {
        let t = &self.table;
        let classified = |r: &ResultRow| {
            r.values
                .iter()
                .chain([&r.oracle])
                .map(|v| Cell::Classified(*v))
                .collect::<Vec<_>>()
        };
        let plain = |vals: &[Option<f64>]| {
            vals.iter()
                .map(|v| Cell::Value(*v))
                .chain([Cell::Blank])
                .collect::<Vec<_>>()
        };
        let mut out: Vec<(String, Vec<Cell>)> = t.rows.iter().map(|r| (r.name.clone(), classified(r))).collect();
        out.push((self.avg.name.clone(), classified(&self.avg)));
        out.push((
            "Avg. Rank".into(),
            plain(&self.avg_rank.iter().map(|v| Some(*v)).collect::<Vec<_>>()),
        ));
        out.push(("Correlation".into(), plain(&self.correlation)));
        if let Some(p) = &self.pooled_correlation {
            out.push(("Correlation (pooled)".into(), plain(p)));
        }
        out.push(("Mean gap".into(), plain(&self.mean_gap)));
        out.push(("Max gap".into(), plain(&self.max_gap)));
        if let Some(so) = &t.source_only {
            out.push((so.name.clone(), classified(so)));
        }
        out
    }

    fn header(&self) -> Vec<&str> {
        self.table
            .validators
            .iter()
            .map(String::as_str)
            .chain([ORACLE_VALIDATOR])
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row"].into_iter().chain(self.header()))?;
        for (label, cells) in self.grid() {
            let mut rec = vec![label];
            rec.extend(cells.iter().map(|c| match c {
                Cell::Value(v) | Cell::Classified(v) => v.map(|x| x.to_string()).unwrap_or_default(),
                Cell::Blank => String::new(),
            }));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<report csv>", e))
    }

    pub fn write_markdown<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<report md>", e);
        let header = self.header();
        writeln!(w, "| | {} |", header.join(" | ")).map_err(io)?;
        writeln!(w, "|---|{}", "---|".repeat(header.len())).map_err(io)?;
        for (label, cells) in self.grid() {
            let rendered: Vec<String> = cells
                .iter()
                .map(|c| match c {
                    Cell::Classified(Some(v)) => format!("{} ({})", two_places(*v), self.table.classify(*v)),
                    Cell::Value(Some(v)) => two_places(*v),
                    _ => "-".into(),
                })
                .collect();
            writeln!(w, "| {label} | {} |", rendered.join(" | ")).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        let metric = if self.table.lower_better { "MSE" } else { "accuracy (%)" };
        writeln!(
            w,
            "Baseline {metric}: {:.2}. Tasks: {}. Correlation: weighted Spearman (exponent {}), mean over tasks.",
            self.table.baseline, self.tasks, self.weight_exponent
        )
        .map_err(io)?;
        Ok(())
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        let mut buf = Vec::new();
        match format {
            ReportFormat::Csv => self.write_csv(&mut buf)?,
            ReportFormat::Markdown => self.write_markdown(&mut buf)?,
        }
        Ok(String::from_utf8(buf).expect("reports are UTF-8"))
    }

    /// `key,value,class` for every classified cell.
    pub fn write_cells<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["key", "value", "class"])?;
        let header = self.header();
        for (label, cells) in self.grid() {
            for (col, c) in header.iter().zip(&cells) {
                if let Cell::Classified(Some(v)) = c {
                    out.write_record([
                        format!("{label}/{col}"),
                        v.to_string(),
                        self.table.classify(*v).to_string(),
                    ])?;
                }
            }
        }
        out.flush().map_err(|e| Error::io("<cells csv>", e))
    }

    pub fn write_correlations<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["validator", "task", "rho_weighted", "rho_unweighted"])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.correlations {
            out.write_record([
                c.validator.clone(),
                c.task.clone(),
                f(c.rho_weighted),
                f(c.rho_unweighted),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<correlations csv>", e))
    }
}

/// Writes `report.csv`, `report.md`, `cells.csv` and `correlations.csv`.
pub fn write_report_dir(report: &AnalysisReport, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: &str| {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    report.write_csv(create("report.csv")?)?;
    report.write_markdown(create("report.md")?)?;
    report.write_cells(create("cells.csv")?)?;
    report.write_correlations(create("correlations.csv")?)
}
