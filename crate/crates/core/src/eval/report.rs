use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::error::Result;

pub const CSV_HEADER: [&str; 7] = ["config", "fdr", "fp_per_scan", "sen", "spe", "f1", "reject_rate"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub metrics: MetricsReport,
}

/// One CSV line: values as rendered, three decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub config: String,
    pub fdr: f64,
    pub fp_per_scan: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    pub reject_rate: f64,
}

fn round3(v: f64) -> f64 {
    format!("{v:.3}").parse().expect("formatted float parses")
}

impl From<&ReportRow> for CsvRow {
    fn from(r: &ReportRow) -> Self {
        let m = &r.metrics;
        CsvRow {
            config: r.label.clone(),
            fdr: round3(m.fdr),
            fp_per_scan: round3(m.fp_per_scan),
            sen: round3(m.sensitivity),
            spe: round3(m.specificity),
            f1: round3(m.f1),
            reject_rate: round3(m.reject_rate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

fn cells(m: &MetricsReport) -> [String; 6] {
    [m.fdr, m.fp_per_scan, m.sensitivity, m.specificity, m.f1, m.reject_rate].map(|v| format!("{v:.3}"))
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let c = cells(&r.metrics);
        w.write_record(std::iter::once(r.label.as_str()).chain(c.iter().map(String::as_str)))?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(crate::error::Error::input(format!(
            "unexpected report header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let titles = ["config", "FDR", "FP/scan", "Sen", "Spe", "F1", "Reject"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.label.clone()];
            v.extend(cells(&r.metrics));
            v
        })
        .collect();
    let widths: Vec<usize> = (0..titles.len())
        .map(|k| body.iter().map(|row| row[k].len()).chain([titles[k].len()]).max().unwrap_or(0))
        .collect();
    let line = |cols: Vec<&str>| {
        cols.iter()
            .enumerate()
            .map(|(k, c)| {
                if k == 0 {
                    format!("{c:<w$}", w = widths[k])
                } else {
                    format!("{c:>w$}", w = widths[k])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(titles.to_vec());
    out.push('\n');
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn emit_report(rows: &[ReportRow]) -> Result<Report> {
    Ok(Report {
        text: report_text(rows),
        csv: report_csv(rows)?,
    })
}

/// Histogram of per-scan false-positive counts as `fp,scans` CSV lines.
pub fn fp_histogram_csv(fp_per_scan: &[u64]) -> String {
    let max = fp_per_scan.iter().copied().max().unwrap_or(0);
    let mut bins = vec![0usize; max as usize + 1];
    for &v in fp_per_scan {
        bins[v as usize] += 1;
    }
    let mut s = String::from("fp,scans\n");
    if fp_per_scan.is_empty() {
        return s;
    }
    for (fp, n) in bins.iter().enumerate() {
        s.push_str(&format!("{fp},{n}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::{metrics, ConfusionCounts};

    fn row(label: &str, c: ConfusionCounts) -> ReportRow {
        ReportRow {
            label: label.into(),
            metrics: metrics(c).unwrap(),
        }
    }

    #[test]
    fn one_row_csv() {
        let rows = [row("GPT-4V", ConfusionCounts::new(46, 48, 1, 126, 28))];
        let csv = report_csv(&rows).unwrap();
        assert_eq!(
            csv,
            "config,fdr,fp_per_scan,sen,spe,f1,reject_rate\nGPT-4V,0.511,1.714,0.979,0.724,0.652,0.000\n"
        );
        let parsed = parse_report_csv(&csv).unwrap();
        assert_eq!(parsed, vec![CsvRow::from(&rows[0])]);
    }

    #[test]
    fn text_is_aligned() {
        let rows = [
            row("all", ConfusionCounts::new(4, 1, 0, 3, 2)),
            row("no-conceal_medical_intent", ConfusionCounts::new(1, 0, 0, 1, 2).with_rejects(6)),
        ];
        let t = report_text(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[2].ends_with("0.750"));
    }

    #[test]
    fn header_is_checked() {
        assert!(parse_report_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn histogram() {
        assert_eq!(fp_histogram_csv(&[0, 2, 2]), "fp,scans\n0,1\n1,0\n2,2\n");
        assert_eq!(fp_histogram_csv(&[]), "fp,scans\n");
    }
}
