//! `report`: aligned text tables and SVG charts from the CSVs under a run
//! directory. Output depends only on the CSV contents, so regenerating over
//! unchanged inputs is byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::commands::{list_files, write_text, Ctx};
use crate::error::{CliError, Result};
use crate::output::{create_dir, CsvData};
use crate::svg::{Chart, Series};

pub const REPORT_DIR: &str = "report";

const KNOWN: [&str; 7] = [
    "sample_stats.csv",
    "train_log.csv",
    "eval.csv",
    "bootstrap.csv",
    "beam_sweep.csv",
    "exact_scores.csv",
    "alpha_sweep.csv",
];

fn rel(root: &Path, p: &Path) -> String {
    let r = p.strip_prefix(root).unwrap_or(p);
    let s = r.display().to_string();
    if s.is_empty() {
        ".".into()
    } else {
        s
    }
}

/// Fixed-width rendering of one CSV, numbers right-aligned.
fn text_table(d: &CsvData) -> String {
    let cols = d.header.len();
    let mut widths: Vec<usize> = d.header.iter().map(String::len).collect();
    for r in &d.rows {
        for (c, cell) in r.iter().enumerate().take(cols) {
            widths[c] = widths[c].max(cell.len());
        }
    }
    let numeric: Vec<bool> = (0..cols)
        .map(|c| d.rows.iter().all(|r| r[c].is_empty() || r[c].parse::<f64>().is_ok()))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if numeric[c] {
                    format!("{s:>w$}", w = widths[c])
                } else {
                    format!("{s:<w$}", w = widths[c])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(&d.header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in &d.rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn points(xs: &[Option<f64>], ys: &[Option<f64>], rows: &[usize]) -> Vec<(f64, f64)> {
    rows.iter()
        .filter_map(|&i| Some((xs[i]?, ys[i]?)))
        .collect()
}

/// Rows of a sweep CSV grouped by (head, alpha), in first-seen order.
fn group_by_model(d: &CsvData) -> Result<Vec<(String, Vec<usize>)>> {
    let heads = d.strings("head")?;
    let alphas = d.strings("alpha")?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..d.rows.len() {
        let key = if alphas[i].is_empty() {
            heads[i].clone()
        } else {
            format!("{} a={}", heads[i], alphas[i])
        };
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(i);
    }
    Ok(order.into_iter().map(|k| {
        let rows = groups[&k].clone();
        (k, rows)
    }).collect())
}

fn chart(title: &str, x: &str, y: &str, log_x: bool) -> Chart {
    Chart {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        log_x,
        series: Vec::new(),
    }
}

pub fn report(ctx: &Ctx, run: Option<PathBuf>) -> Result<()> {
    let root = run
        .or_else(|| ctx.out.clone())
        .ok_or_else(|| CliError::Config("no run directory given".into()))?;
    if !root.is_dir() {
        return Err(CliError::Config(format!("run directory {} does not exist", root.display())));
    }
    let out = root.join(REPORT_DIR);
    let mut files = Vec::new();
    list_files(&root, &out, &mut files)?;
    let csvs: Vec<PathBuf> = files
        .into_iter()
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| KNOWN.contains(&n)))
        .collect();
    if csvs.is_empty() {
        return Err(CliError::NothingToReport(root.display().to_string()));
    }
    create_dir(&out)?;

    let mut summary = String::new();
    let mut beam_charts = [
        ("beam_bleu.svg", chart("BLEU by beam size", "beam size", "BLEU", true), "bleu"),
        ("beam_logprob.svg", chart("Mean log-probability by beam size", "beam size", "mean log-prob", true), "mean_logprob"),
        ("beam_search_errors.svg", chart("Search errors by beam size", "beam size", "search error rate", true), "search_error_rate"),
        ("beam_length_ratio.svg", chart("Length ratio by beam size", "beam size", "length ratio", true), "length_ratio"),
    ];
    let mut alpha_bleu = chart("BLEU by alpha", "alpha", "BLEU", false);
    let mut alpha_len = chart("Exact-search length ratio by alpha", "alpha", "length ratio", false);
    let mut alpha_gap = chart("Exact minus empty log-probability by alpha", "alpha", "log-prob gap", false);
    let mut dev_bleu = chart("Dev greedy BLEU during training", "step", "BLEU", false);
    let mut dev_loss = chart("Dev loss during training", "step", "loss", false);

    for path in &csvs {
        let d = CsvData::read(path)?;
        let name = rel(&root, path);
        let dir = rel(&root, path.parent().unwrap_or(&root));
        summary.push_str(&format!("== {name}\n"));
        if d.rows.len() > 50 {
            let head = CsvData {
                rows: d.rows[..50].to_vec(),
                ..d.clone()
            };
            summary.push_str(&text_table(&head));
            summary.push_str(&format!("... {} more rows\n", d.rows.len() - 50));
        } else {
            summary.push_str(&text_table(&d));
        }
        summary.push('\n');
        let file = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match file {
            "beam_sweep.csv" => {
                let xs = d.floats("beam_size")?;
                let groups = group_by_model(&d)?;
                for (_, c, col) in beam_charts.iter_mut() {
                    let ys = d.floats(col)?;
                    for (label, rows) in &groups {
                        c.series.push(Series {
                            label: format!("{dir}: {label}"),
                            points: points(&xs, &ys, rows),
                        });
                    }
                }
            }
            "alpha_sweep.csv" => {
                let xs = d.floats("alpha")?;
                let rows: Vec<usize> = (0..d.rows.len()).filter(|&i| xs[i].is_some()).collect();
                for (col, lbl) in [("greedy_bleu", "greedy"), ("beam4_bleu", "beam 4"), ("exact_bleu", "exact")] {
                    alpha_bleu.series.push(Series {
                        label: format!("{dir}: {lbl}"),
                        points: points(&xs, &d.floats(col)?, &rows),
                    });
                }
                alpha_len.series.push(Series {
                    label: dir.clone(),
                    points: points(&xs, &d.floats("exact_length_ratio")?, &rows),
                });
                alpha_gap.series.push(Series {
                    label: dir.clone(),
                    points: points(&xs, &d.floats("gap_mean")?, &rows),
                });
            }
            "train_log.csv" => {
                let xs = d.floats("step")?;
                let all: Vec<usize> = (0..d.rows.len()).collect();
                dev_bleu.series.push(Series {
                    label: dir.clone(),
                    points: points(&xs, &d.floats("dev_bleu")?, &all),
                });
                dev_loss.series.push(Series {
                    label: dir.clone(),
                    points: points(&xs, &d.floats("dev_loss")?, &all),
                });
            }
            _ => {}
        }
    }

    write_text(&out.join("summary.txt"), &summary)?;
    let mut charts: Vec<(&str, &Chart)> = beam_charts.iter().map(|(f, c, _)| (*f, c)).collect();
    charts.extend([
        ("alpha_bleu.svg", &alpha_bleu),
        ("alpha_length_ratio.svg", &alpha_len),
        ("alpha_gap.svg", &alpha_gap),
        ("training_dev_bleu.svg", &dev_bleu),
        ("training_dev_loss.svg", &dev_loss),
    ]);
    for (file, c) in charts {
        if !c.series.is_empty() {
            write_text(&out.join(file), &c.render())?;
        }
    }
    println!("report written to {}", out.display());
    Ok(())
}
