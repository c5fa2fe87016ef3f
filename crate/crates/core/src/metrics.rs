//! Top-k accuracy, confusion matrix, per-class recall / FNR / F1, and report
//! rendering (text table, CSV, SVG bar chart).
//!
//! Ties between equal logits go to the lower class index, both for top-k
//! membership and for the top-1 prediction. A class with no samples gets
//! recall 1.0 and is flagged as absent; it is left out of the mean FNR.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_logits<T>(logits: &[T], num_classes: usize, labels: &[usize]) -> Result<()> {
    if num_classes == 0 || logits.len() != labels.len() * num_classes {
        return Err(Error::Shape(format!(
            "{} logits do not form {} rows of {num_classes}",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
    }
    Ok(())
}

/// Zero-based position of `label` when the row is sorted by descending
/// logit with ties broken by lower index.
pub fn rank_of<T: Scalar>(row: &[T], label: usize) -> usize {
    let t = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < label))
        .count()
}

/// Highest logit, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Class indices of `row` in descending order of logit (ties by lower index).
pub fn ranking<T: Scalar>(row: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Fraction of rows whose label is among the `k` highest logits.
pub fn topk_accuracy<T: Scalar>(logits: &[T], num_classes: usize, labels: &[usize], k: usize) -> Result<f64> {
    check_logits(logits, num_classes, labels)?;
    if k < 1 || k > num_classes {
        return Err(Error::Input(format!("k = {k} outside [1, {num_classes}]")));
    }
    if labels.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let hits = logits
        .chunks(num_classes)
        .zip(labels)
        .filter(|(row, &l)| rank_of(row, l) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn predictions<T: Scalar>(logits: &[T], num_classes: usize) -> Vec<usize> {
    logits.chunks(num_classes).map(argmax).collect()
}

/// `confusion[truth][pred]` counts and per-class recall.
pub fn confusion_and_recall(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(Vec<Vec<u64>>, Vec<f64>)> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::Input(format!("class {bad} outside [0, {num_classes})")));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        confusion[t][p] += 1;
    }
    let recall = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 { 1.0 } else { row[c] as f64 / total as f64 }
        })
        .collect();
    Ok((confusion, recall))
}

/// Per-class `1 − recall` and its mean over the classes marked present.
pub fn fnr(recall: &[f64], present: &[bool]) -> (Vec<f64>, f64) {
    let per: Vec<f64> = recall.iter().map(|r| 1.0 - r).collect();
    let (sum, n) = per
        .iter()
        .zip(present)
        .filter(|(_, &p)| p)
        .fold((0.0, 0usize), |(s, n), (f, _)| (s + f, n + 1));
    (per, if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Harmonic mean of precision and recall per class; 0 when both vanish.
pub fn f1_scores(confusion: &[Vec<u64>]) -> Vec<f64> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let denom = support as f64 + predicted as f64;
            if denom == 0.0 { 0.0 } else { 2.0 * tp / denom }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Class abbreviations in label order.
    pub classes: Vec<String>,
    pub n_samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub per_class_recall: Vec<f64>,
    pub per_class_fnr: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub mean_fnr: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_logits<T: Scalar>(logits: &[T], labels: &[usize], classes: &[String]) -> Result<Self> {
        let k = classes.len();
        let top1 = topk_accuracy(logits, k, labels, 1)?;
        let top5 = topk_accuracy(logits, k, labels, k.min(5))?;
        let (confusion, recall) = confusion_and_recall(&predictions(logits, k), labels, k)?;
        let present: Vec<bool> = confusion.iter().map(|r| r.iter().sum::<u64>() > 0).collect();
        let (per_class_fnr, mean_fnr) = fnr(&recall, &present);
        Ok(EvalReport {
            classes: classes.to_vec(),
            n_samples: labels.len(),
            top1,
            top5,
            per_class_f1: f1_scores(&confusion),
            per_class_recall: recall,
            per_class_fnr,
            mean_fnr,
            confusion,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.confusion[class].iter().sum()
    }

    /// Classes with no samples (recall set to 1.0 by convention).
    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| self.support(c) == 0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "svg" | "svg-bars" => Ok(ReportFormat::Svg),
            other => Err(Error::Input(format!("unknown report format {other:?} (text, csv, svg)"))),
        }
    }
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Svg => render_svg(report),
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render_report(report, format)).map_err(|e| Error::io(path, e))
}

pub fn render_text(report: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "{:<8} {:>7} {:>8} {:>8} {:>8}", "class", "support", "recall", "f1", "fnr").unwrap();
    for (c, name) in report.classes.iter().enumerate() {
        let mark = if report.support(c) == 0 { " *" } else { "" };
        writeln!(
            s,
            "{:<8} {:>7} {:>8.4} {:>8.4} {:>8.4}{mark}",
            name,
            report.support(c),
            report.per_class_recall[c],
            report.per_class_f1[c],
            report.per_class_fnr[c]
        )
        .unwrap();
    }
    writeln!(s, "top1 {:.4}  top5 {:.4}  mean_fnr {:.4}  n {}", report.top1, report.top5, report.mean_fnr, report.n_samples)
        .unwrap();
    if !report.absent_classes().is_empty() {
        writeln!(s, "* no samples; recall reported as 1.0").unwrap();
    }
    s
}

/// Header: `row,class,support,recall,fnr,f1,top1,top5,mean_fnr,pred_<class>...`.
///
/// One row per class (`row` = label index, summary columns empty) followed
/// by a `summary` row (`support` = sample count, per-class columns empty).
pub fn render_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> =
        ["row", "class", "support", "recall", "fnr", "f1", "top1", "top5", "mean_fnr"].map(String::from).to_vec();
    header.extend(report.classes.iter().map(|c| format!("pred_{c}")));
    w.write_record(&header).unwrap();
    let f = |v: f64| format!("{v:?}");
    for (c, name) in report.classes.iter().enumerate() {
        let mut rec = vec![
            c.to_string(),
            name.clone(),
            report.support(c).to_string(),
            f(report.per_class_recall[c]),
            f(report.per_class_fnr[c]),
            f(report.per_class_f1[c]),
            String::new(),
            String::new(),
            String::new(),
        ];
        rec.extend(report.confusion[c].iter().map(u64::to_string));
        w.write_record(&rec).unwrap();
    }
    let mut rec = vec![
        "summary".to_string(),
        String::new(),
        report.n_samples.to_string(),
        String::new(),
        String::new(),
        String::new(),
        f(report.top1),
        f(report.top5),
        f(report.mean_fnr),
    ];
    rec.extend(std::iter::repeat_n(String::new(), report.num_classes()));
    w.write_record(&rec).unwrap();
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn parse_report_csv(text: &str) -> Result<EvalReport> {
    let perr = |m: String| Error::Parse(format!("report csv: {m}"));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| perr(e.to_string()))?.clone();
    if header.len() < 9 || &header[0] != "row" {
        return Err(perr("unexpected header".into()));
    }
    let k = header.len() - 9;
    let num = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("{s:?}: {e}")));
    let count = |s: &str| s.parse::<u64>().map_err(|e| perr(format!("{s:?}: {e}")));
    let mut report = EvalReport {
        classes: Vec::with_capacity(k),
        n_samples: 0,
        top1: 0.0,
        top5: 0.0,
        per_class_recall: Vec::new(),
        per_class_fnr: Vec::new(),
        per_class_f1: Vec::new(),
        mean_fnr: 0.0,
        confusion: Vec::new(),
    };
    let mut saw_summary = false;
    for rec in r.records() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if &rec[0] == "summary" {
            report.n_samples = count(&rec[2])? as usize;
            report.top1 = num(&rec[6])?;
            report.top5 = num(&rec[7])?;
            report.mean_fnr = num(&rec[8])?;
            saw_summary = true;
            continue;
        }
        report.classes.push(rec[1].to_string());
        report.per_class_recall.push(num(&rec[3])?);
        report.per_class_fnr.push(num(&rec[4])?);
        report.per_class_f1.push(num(&rec[5])?);
        report.confusion.push((9..9 + k).map(|i| count(&rec[i])).collect::<Result<_>>()?);
    }
    if !saw_summary || report.classes.len() != k {
        return Err(perr(format!("expected {k} class rows and a summary row")));
    }
    Ok(report)
}

/// One bar per class, height proportional to its false-negative rate.
pub fn render_svg(report: &EvalReport) -> String {
    const BAR: f64 = 24.0;
    const GAP: f64 = 8.0;
    const PLOT_H: f64 = 200.0;
    const TOP: f64 = 30.0;
    const LEFT: f64 = 40.0;
    let k = report.num_classes();
    let width = LEFT + k as f64 * (BAR + GAP) + GAP;
    let height = TOP + PLOT_H + 60.0;
    let base = TOP + PLOT_H;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#)
        .unwrap();
    writeln!(s, r#"<text x="{LEFT}" y="18" font-size="12">false negative rate per class (mean {:.4})</text>"#, report.mean_fnr)
        .unwrap();
    writeln!(s, r#"<line x1="{LEFT}" y1="{base}" x2="{width}" y2="{base}" stroke="black"/>"#).unwrap();
    for (c, name) in report.classes.iter().enumerate() {
        let fnr = report.per_class_fnr[c];
        let h = fnr * PLOT_H;
        let x = LEFT + GAP + c as f64 * (BAR + GAP);
        writeln!(
            s,
            r#"<rect class="bar" data-class="{name}" data-fnr="{fnr:?}" x="{x}" y="{}" width="{BAR}" height="{h}" fill="steelblue"/>"#,
            base - h
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="9" transform="rotate(60 {0} {1})">{name}</text>"#,
            x + 4.0,
            base + 12.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn ranks_with_ties() {
        let row = [1.0f64, 3.0, 3.0, 0.0];
        assert_eq!(rank_of(&row, 1), 0);
        assert_eq!(rank_of(&row, 2), 1);
        assert_eq!(rank_of(&row, 3), 3);
        assert_eq!(argmax(&row), 1);
        assert_eq!(ranking(&row), vec![1, 2, 0, 3]);
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let logits = vec![0.0f32; 6];
        assert!(matches!(topk_accuracy(&logits, 3, &[0, 3], 1), Err(Error::Input(_))));
        assert!(matches!(topk_accuracy(&logits, 3, &[0, 1], 4), Err(Error::Input(_))));
        assert!(matches!(topk_accuracy(&logits, 3, &[0], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn absent_class_is_flagged() {
        let logits = [1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0];
        let r = EvalReport::from_logits(&logits, &[0, 1], &names(3)).unwrap();
        assert_eq!(r.absent_classes(), vec![2]);
        assert_eq!(r.per_class_recall[2], 1.0);
        assert!(render_text(&r).contains("c2") && render_text(&r).contains('*'));
    }

    #[test]
    fn csv_roundtrip_small() {
        let logits = [0.3f64, 0.1, 0.9, 0.2, 0.5, 0.4, 0.0, 0.0, 0.0];
        let r = EvalReport::from_logits(&logits, &[2, 0, 1], &names(3)).unwrap();
        assert_eq!(parse_report_csv(&render_csv(&r)).unwrap(), r);
    }

    #[test]
    fn format_names() {
        assert_eq!("svg-bars".parse::<ReportFormat>().unwrap(), ReportFormat::Svg);
        assert!("pdf".parse::<ReportFormat>().is_err());
    }
}
