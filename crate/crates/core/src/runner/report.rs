//! Deterministic report rendering from result records.

use crate::error::{Error, Result};
use crate::runner::config::{AttackSpec, DefenseSpec};
use crate::runner::record::ExperimentRecord;
use crate::schedule::LevelKind;
use crate::tasks::TaskKind;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Latex,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "latex" | "tex" => Ok(ReportFormat::Latex),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!(
                "unknown report format {other:?}; expected markdown, latex, or csv"
            ))),
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "report.md",
            ReportFormat::Latex => "report.tex",
            ReportFormat::Csv => "report.csv",
        }
    }
}

/// Direction that is better for the defender; empty for neutral metrics.
fn direction(metric: &str) -> &'static str {
    match metric {
        "accuracy" | "miou" | "map" | "cls_cos_sim" => "higher better",
        "rmse_depth" => "lower better",
        _ => "",
    }
}

fn metric_rank(metric: &str) -> usize {
    [
        "accuracy",
        "miou",
        "rmse_depth",
        "map",
        "cls_cos_sim",
        "psnr",
    ]
    .iter()
    .position(|m| *m == metric)
    .unwrap_or(6)
}

fn task_rank(task: TaskKind) -> usize {
    TaskKind::ALL
        .iter()
        .position(|t| *t == task)
        .unwrap_or(usize::MAX)
}

fn method_rank(method: &str) -> usize {
    ["none", "pgd", "mifgsm", "sia"]
        .iter()
        .position(|m| *m == method)
        .unwrap_or(4)
}

fn level_rank(kind: LevelKind) -> usize {
    match kind {
        LevelKind::None => 0,
        LevelKind::Low => 1,
        LevelKind::High => 2,
        LevelKind::Range => 3,
    }
}

/// Report row order: grouped by method, then noise level, then diffusion
/// probability, so adaptive variants sit under their base attack.
fn attack_key(a: &AttackSpec) -> (usize, usize, u64, String) {
    (
        method_rank(&a.method),
        level_rank(a.noise_level.kind),
        a.p_diffusion.to_bits(),
        a.label(),
    )
}

fn defense_key(d: &DefenseSpec) -> (usize, usize, usize) {
    let mode = match d.mode {
        crate::defense::DefenseMode::None => 0,
        crate::defense::DefenseMode::Denoise => 1,
    };
    (mode, level_rank(d.level.kind), d.samples)
}

fn format_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn tex_escape(s: &str) -> String {
    s.replace('_', "\\_")
}

/// Renders sorted records in the requested format. A pure function: equal
/// record sets (in any order) produce byte-identical text.
pub fn emit_report(records: &[ExperimentRecord], format: ReportFormat) -> Result<String> {
    if records.is_empty() {
        return Err(Error::EmptyInput("emit_report needs at least one record"));
    }
    let mut sorted: Vec<&ExperimentRecord> = records.iter().collect();
    sorted.sort_by_key(|r| {
        (
            task_rank(r.task),
            metric_rank(&r.metric),
            r.metric.clone(),
            attack_key(&r.attack),
            defense_key(&r.defense),
        )
    });
    match format {
        ReportFormat::Csv => Ok(render_csv(&sorted)),
        ReportFormat::Markdown => Ok(render_tables(&sorted, false)),
        ReportFormat::Latex => Ok(render_tables(&sorted, true)),
    }
}

fn render_csv(sorted: &[&ExperimentRecord]) -> String {
    let mut out = String::from(
        "fingerprint,attack,defense,task,metric,value,n_images,wall_time_s,timestamp\n",
    );
    for r in sorted {
        let value = if r.value.is_infinite() {
            "inf".to_string()
        } else {
            format!("{}", r.value)
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.fingerprint,
            r.attack.label(),
            r.defense.label(),
            r.task.as_str(),
            r.metric,
            value,
            r.n_images,
            r.wall_time_s,
            r.timestamp
        ));
    }
    out
}

/// One matrix (attack rows x defense columns) per (task, metric) section.
fn render_tables(sorted: &[&ExperimentRecord], latex: bool) -> String {
    // Section key -> (row labels, col labels, values); BTreeMap keeps the
    // canonical sort of the input.
    type Section = (Vec<String>, Vec<String>, BTreeMap<(usize, usize), f64>);
    let mut order: Vec<(usize, usize, String, TaskKind, String)> = Vec::new();
    let mut sections: BTreeMap<(usize, usize, String), Section> = BTreeMap::new();
    for r in sorted {
        let key = (task_rank(r.task), metric_rank(&r.metric), r.metric.clone());
        if !sections.contains_key(&key) {
            order.push((key.0, key.1, key.2.clone(), r.task, r.metric.clone()));
        }
        let entry = sections
            .entry(key)
            .or_insert_with(|| (Vec::new(), Vec::new(), BTreeMap::new()));
        let row_label = r.attack.label();
        let col_label = r.defense.label();
        let ri = match entry.0.iter().position(|l| *l == row_label) {
            Some(i) => i,
            None => {
                entry.0.push(row_label);
                entry.0.len() - 1
            }
        };
        let ci = match entry.1.iter().position(|l| *l == col_label) {
            Some(i) => i,
            None => {
                entry.1.push(col_label);
                entry.1.len() - 1
            }
        };
        entry.2.insert((ri, ci), r.value);
    }

    let mut out = if latex {
        String::from("% grid report: attack rows x defense columns\n")
    } else {
        String::from("# Grid report\n")
    };
    for (tr, mr, metric, task, metric_name) in order {
        let section = &sections[&(tr, mr, metric)];
        let (rows, cols, values) = section;
        let dir = direction(&metric_name);
        let suffix = if dir.is_empty() {
            String::new()
        } else {
            format!(" ({dir} for the defender)")
        };
        if latex {
            out.push_str(&format!(
                "\n% {} -- {}{}\n\\begin{{tabular}}{{l|{}}}\n",
                task.as_str(),
                tex_escape(&metric_name),
                suffix,
                "r".repeat(cols.len())
            ));
            out.push_str(&format!(
                "attack & {} \\\\\n\\hline\n",
                cols.iter()
                    .map(|c| tex_escape(c))
                    .collect::<Vec<_>>()
                    .join(" & ")
            ));
            for (ri, row) in rows.iter().enumerate() {
                let cells: Vec<String> = (0..cols.len())
                    .map(|ci| {
                        values
                            .get(&(ri, ci))
                            .map(|&v| format_value(v))
                            .unwrap_or_else(|| "-".into())
                    })
                    .collect();
                out.push_str(&format!(
                    "{} & {} \\\\\n",
                    tex_escape(row),
                    cells.join(" & ")
                ));
            }
            out.push_str("\\end{tabular}\n");
        } else {
            out.push_str(&format!(
                "\n## {} — {}{}\n\n",
                task.as_str(),
                metric_name,
                suffix
            ));
            out.push_str(&format!("| attack | {} |\n", cols.join(" | ")));
            out.push_str(&format!("| --- |{}\n", " --- |".repeat(cols.len())));
            for (ri, row) in rows.iter().enumerate() {
                let cells: Vec<String> = (0..cols.len())
                    .map(|ci| {
                        values
                            .get(&(ri, ci))
                            .map(|&v| format_value(v))
                            .unwrap_or_else(|| "-".into())
                    })
                    .collect();
                out.push_str(&format!("| {} | {} |\n", row, cells.join(" | ")));
            }
        }
    }
    out
}
