use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use emoguard_core::data::Task;
use emoguard_core::model::{AdversaryTarget, GrlPlacement, Modality, Mode, ModelSpec};
use emoguard_core::stats::{bh_adjust, paired_t_test};
use serde::{Deserialize, Serialize};

use crate::config::{BhFamily, Scenario, FOLDS};
use crate::error::{Error, Result};

pub const SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "U(M)")]
    UMale,
    #[serde(rename = "U(F)")]
    UFemale,
    U,
    L,
    P,
    MI,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::UMale, Metric::UFemale, Metric::U, Metric::L, Metric::P, Metric::MI];

    pub fn label(self) -> &'static str {
        match self {
            Metric::UMale => "U(M)",
            Metric::UFemale => "U(F)",
            Metric::U => "U",
            Metric::L => "L",
            Metric::P => "P",
            Metric::MI => "MI",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    /// One value per fold rotation.
    pub folds: Vec<f64>,
    /// Set on compared cells: BH-adjusted p below alpha against the baseline.
    pub significant: Option<bool>,
    pub p_adjusted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub modality: Modality,
    pub task: Task,
    pub mode: Mode,
    /// λ of the Priv adversaries; absent in Gen mode.
    pub lambda: Option<f64>,
    pub placement: GrlPlacement,
    pub adversaries: Vec<AdversaryTarget>,
    pub spec: ModelSpec,
    pub metrics: BTreeMap<Metric, Cell>,
}

impl Row {
    pub fn new(spec: ModelSpec) -> Self {
        let lambda = match spec.mode {
            Mode::Gen => None,
            Mode::Priv => spec.adversaries.first().map(|a| a.lambda),
        };
        let adversaries = match spec.mode {
            Mode::Gen => Vec::new(),
            Mode::Priv => spec.adversaries.iter().map(|a| a.target).collect(),
        };
        Self {
            modality: spec.modality,
            task: spec.task,
            mode: spec.mode,
            lambda,
            placement: spec.grl_placement,
            adversaries,
            spec,
            metrics: BTreeMap::new(),
        }
    }

    /// Short label of the Priv variant, e.g. `λ=0.5 gender+speaker per-stream`.
    pub fn variant(&self) -> String {
        let mut parts = Vec::new();
        if let Some(l) = self.lambda {
            parts.push(format!("λ={l}"));
        }
        if !self.adversaries.is_empty() {
            let names: Vec<&str> = self
                .adversaries
                .iter()
                .map(|a| match a {
                    AdversaryTarget::Gender => "gender",
                    AdversaryTarget::Speaker => "speaker",
                })
                .collect();
            parts.push(names.join("+"));
        }
        if self.placement == GrlPlacement::PerStream {
            parts.push("per-stream".into());
        }
        parts.join(" ")
    }

    fn sort_key(&self) -> impl Ord {
        (
            self.task,
            self.modality,
            self.mode,
            self.placement,
            self.adversaries.clone(),
            self.lambda.map(f64::to_bits),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: Metric,
    /// Row indices.
    pub baseline: usize,
    pub treatment: usize,
    /// Mean of treatment minus baseline over folds.
    pub mean_difference: f64,
    /// Absent when the differences have zero spread.
    pub t: Option<f64>,
    pub df: usize,
    pub p: f64,
    pub p_adjusted: f64,
    pub reject: bool,
    pub degenerate: bool,
    pub family: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub config_hash: String,
    pub master_seed: u64,
    pub alpha: f64,
    pub bh_family: BhFamily,
    pub rows: Vec<Row>,
    pub comparisons: Vec<Comparison>,
}

/// A requested comparison: `metric` of row `treatment` against row `baseline`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Planned {
    pub metric: Metric,
    pub baseline: usize,
    pub treatment: usize,
}

fn family_name(family: BhFamily, task: Task, metric: Metric) -> String {
    let task = match task {
        Task::Activation => "activation",
        Task::Valence => "valence",
    };
    match family {
        BhFamily::PerTask => task.to_string(),
        BhFamily::PerMetric => format!("{task}/{}", metric.label()),
        BhFamily::Scenario => "all".to_string(),
    }
}

impl MetricsReport {
    /// Sorts rows, runs the paired tests, adjusts each family and marks the
    /// treatment cells. `planned` indexes the rows as given.
    pub fn assemble(
        scenario: Scenario,
        config_hash: String,
        master_seed: u64,
        alpha: f64,
        bh_family: BhFamily,
        rows: Vec<Row>,
        planned: &[Planned],
    ) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            for (m, c) in &r.metrics {
                if c.folds.len() != FOLDS {
                    return Err(Error::Config(format!("row {i} metric {} has {} folds", m.label(), c.folds.len())));
                }
            }
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| rows[i].sort_key());
        let mut position = vec![0; rows.len()];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        let mut rows: Vec<Option<Row>> = rows.into_iter().map(Some).collect();
        let mut rows: Vec<Row> = order.iter().map(|&i| rows[i].take().expect("each row once")).collect();

        let mut comparisons = Vec::with_capacity(planned.len());
        for p in planned {
            let (b, t) = (position[p.baseline], position[p.treatment]);
            let cell = |r: usize| {
                rows[r]
                    .metrics
                    .get(&p.metric)
                    .ok_or_else(|| Error::Config(format!("row {r} has no {} to compare", p.metric.label())))
            };
            let (base, treat) = (cell(b)?, cell(t)?);
            let test = paired_t_test(&treat.folds, &base.folds)?;
            comparisons.push(Comparison {
                metric: p.metric,
                baseline: b,
                treatment: t,
                mean_difference: treat.mean - base.mean,
                t: test.t.is_finite().then_some(test.t),
                df: test.df,
                p: test.p,
                p_adjusted: test.p,
                reject: false,
                degenerate: test.degenerate,
                family: family_name(bh_family, rows[t].task, p.metric),
            });
        }
        comparisons.sort_by(|a, b| {
            (a.family.as_str(), a.treatment, a.metric, a.baseline).cmp(&(b.family.as_str(), b.treatment, b.metric, b.baseline))
        });

        let mut families: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, c) in comparisons.iter().enumerate() {
            families.entry(c.family.clone()).or_default().push(i);
        }
        for idx in families.values() {
            let pvals: Vec<f64> = idx.iter().map(|&i| comparisons[i].p).collect();
            let adj = bh_adjust(&pvals, alpha)?;
            for (k, &i) in idx.iter().enumerate() {
                comparisons[i].p_adjusted = adj.adjusted[k];
                comparisons[i].reject = adj.reject[k];
            }
        }
        for c in &comparisons {
            let cell = rows[c.treatment].metrics.get_mut(&c.metric).expect("checked above");
            cell.significant = Some(cell.significant.unwrap_or(false) || c.reject);
            cell.p_adjusted = Some(cell.p_adjusted.map_or(c.p_adjusted, |p| p.min(c.p_adjusted)));
        }
        Ok(Self {
            scenario,
            config_hash,
            master_seed,
            alpha,
            bh_family,
            rows,
            comparisons,
        })
    }

    /// Pretty JSON with object keys sorted.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self).map_err(Error::json("report.json"))?;
        let mut text = serde_json::to_string_pretty(&value).map_err(Error::json("report.json"))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(Error::json("report.json"))
    }

    /// One line per (row, metric, fold).
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("modality,task,mode,lambda,placement,adversaries,metric,fold,value\n");
        for r in &self.rows {
            let head = format!(
                "{},{},{},{},{},{}",
                enum_name(&r.modality),
                enum_name(&r.task),
                enum_name(&r.mode),
                r.lambda.map(|l| l.to_string()).unwrap_or_default(),
                enum_name(&r.placement),
                r.adversaries.iter().map(enum_name).collect::<Vec<_>>().join("+"),
            );
            for (m, c) in &r.metrics {
                for (f, v) in c.folds.iter().enumerate() {
                    let _ = writeln!(out, "{head},{},{f},{v}", m.label());
                }
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let files = [
            ("report.json", self.to_json()?),
            ("report.md", emit_table(self)),
            ("folds.csv", self.folds_csv()),
            ("report.schema.json", SCHEMA.to_string()),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text).map_err(Error::io(&path))?;
        }
        Ok(())
    }
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s.to_lowercase(),
        _ => String::new(),
    }
}

fn fmt_cell(cell: Option<&Cell>) -> String {
    match cell {
        None => "n/a".into(),
        Some(c) if c.significant == Some(true) => format!("**{:.3}**", c.mean),
        Some(c) => format!("{:.3}", c.mean),
    }
}

fn table_columns(mode: Mode) -> Vec<Metric> {
    match mode {
        Mode::Gen => Metric::ALL.to_vec(),
        Mode::Priv => Metric::ALL.into_iter().filter(|&m| m != Metric::L).collect(),
    }
}

/// Markdown tables: one per task and mode, or paired Activation/Valence
/// groups for the multi-adversary scenario. Bold cells differ significantly from their baseline.
pub fn emit_table(report: &MetricsReport) -> String {
    let mut out = format!(
        "# {} (config {}, seed {})\n\n",
        report.scenario, report.config_hash, report.master_seed
    );
    if report.scenario == Scenario::Q7Multi {
        emit_paired(report, &mut out);
    } else {
        for task in [Task::Activation, Task::Valence] {
            for mode in [Mode::Gen, Mode::Priv] {
                let rows: Vec<&Row> = report.rows.iter().filter(|r| r.task == task && r.mode == mode).collect();
                if !rows.is_empty() {
                    emit_one(&rows, task, mode, &mut out);
                }
            }
        }
    }
    let _ = writeln!(
        out,
        "Bold: Benjamini-Hochberg adjusted p < {} (paired t-test over {FOLDS} folds, family {}).",
        report.alpha,
        enum_name(&report.bh_family)
    );
    out
}

fn missing_note(rows: &[&Row], columns: &[Metric]) -> Option<String> {
    let missing: Vec<&str> = columns
        .iter()
        .filter(|m| rows.iter().all(|r| !r.metrics.contains_key(m)))
        .map(|m| m.label())
        .collect();
    (!missing.is_empty()).then(|| format!("Not measured in this scenario: {}.\n", missing.join(", ")))
}

fn emit_one(rows: &[&Row], task: Task, mode: Mode, out: &mut String) {
    let columns = table_columns(mode);
    let _ = writeln!(out, "## {mode:?}, {}\n", enum_name(&task));
    let mut header = String::from("| Modality |");
    let mut rule = String::from("|---|");
    if mode == Mode::Priv {
        header.push_str(" Variant |");
        rule.push_str("---|");
    }
    for m in &columns {
        let _ = write!(header, " {} |", m.label());
        rule.push_str("---|");
    }
    let _ = writeln!(out, "{header}\n{rule}");
    for r in rows {
        let mut line = format!("| {} |", enum_name(&r.modality));
        if mode == Mode::Priv {
            let _ = write!(line, " {} |", r.variant());
        }
        for m in &columns {
            let _ = write!(line, " {} |", fmt_cell(r.metrics.get(m)));
        }
        let _ = writeln!(out, "{line}");
    }
    out.push('\n');
    if let Some(note) = missing_note(rows, &columns) {
        let _ = writeln!(out, "{note}");
    }
}

fn emit_paired(report: &MetricsReport, out: &mut String) {
    let columns = [Metric::U, Metric::P, Metric::MI];
    let _ = writeln!(out, "## Multi-attribute adversaries\n");
    let mut header = String::from("| Modality | Mode | Variant |");
    let mut rule = String::from("|---|---|---|");
    for task in ["Activation", "Valence"] {
        for m in &columns {
            let _ = write!(header, " {task} {} |", m.label());
            rule.push_str("---|");
        }
    }
    let _ = writeln!(out, "{header}\n{rule}");
    let mut groups: BTreeMap<(Modality, Mode, String), [Option<&Row>; 2]> = BTreeMap::new();
    for r in &report.rows {
        let slot = match r.task {
            Task::Activation => 0,
            Task::Valence => 1,
        };
        groups.entry((r.modality, r.mode, r.variant())).or_default()[slot] = Some(r);
    }
    for ((modality, mode, variant), pair) in &groups {
        let mut line = format!("| {} | {mode:?} | {variant} |", enum_name(modality));
        for r in pair {
            for m in &columns {
                let _ = write!(line, " {} |", fmt_cell(r.and_then(|r| r.metrics.get(m))));
            }
        }
        let _ = writeln!(out, "{line}");
    }
    out.push('\n');
}

/// A fold-level cell from per-fold values.
pub fn cell(folds: Vec<f64>) -> Cell {
    let mean = folds.iter().sum::<f64>() / folds.len() as f64;
    Cell {
        mean,
        folds,
        significant: None,
        p_adjusted: None,
    }
}
