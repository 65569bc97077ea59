use std::fs;
use std::path::Path;

use super::{quartiles, DiceReport};
use crate::volcore::RegionCode;
use crate::{Error, Result};

pub const BOXPLOT_HEADER: &str = "region,n,min,q1,median,q3,max,outliers,guideline";

/// Five-number summary of one region. `min`/`max` are the whisker ends
/// (extreme values inside 1.5·IQR of the hinges); values beyond are listed
/// as outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRow {
    pub region: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub outliers: Vec<f64>,
    pub guideline: f64,
}

pub fn box_stats(region: &str, values: &[f64], guideline: f64) -> Option<BoxRow> {
    let (q1, median, q3) = quartiles(values)?;
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = values.iter().copied().filter(|v| (lo..=hi).contains(v)).collect();
    let mut outliers: Vec<f64> = values.iter().copied().filter(|v| !(lo..=hi).contains(v)).collect();
    outliers.sort_by(f64::total_cmp);
    Some(BoxRow {
        region: region.into(),
        n: values.len(),
        min: inside.iter().copied().fold(f64::INFINITY, f64::min),
        q1,
        median,
        q3,
        max: inside.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        outliers,
        guideline,
    })
}

/// One row per region present in the report, in region-code order.
pub fn boxplot_rows(r: &DiceReport) -> Vec<BoxRow> {
    RegionCode::ALL.iter().filter_map(|&reg| box_stats(reg.name(), &r.values(reg), r.guideline)).collect()
}

/// Shortest round-trip representation, padded to at least two decimals.
fn num(v: f64) -> String {
    let s = format!("{v}");
    match s.split_once('.') {
        Some((_, frac)) if frac.len() >= 2 => s,
        Some((_, frac)) => format!("{s}{}", "0".repeat(2 - frac.len())),
        None => format!("{s}.00"),
    }
}

pub fn boxplot_csv(rows: &[BoxRow]) -> String {
    let mut out = String::from(BOXPLOT_HEADER);
    out.push('\n');
    for b in rows {
        let outliers: Vec<String> = b.outliers.iter().map(|&v| num(v)).collect();
        out += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            b.region,
            b.n,
            num(b.min),
            num(b.q1),
            num(b.median),
            num(b.q3),
            num(b.max),
            outliers.join(";"),
            num(b.guideline)
        );
    }
    out
}

pub fn boxplot_export(r: &DiceReport, path: impl AsRef<Path>) -> Result<()> {
    let rows = boxplot_rows(r);
    if rows.is_empty() {
        return Err(Error::Invalid("report has no non-empty entries to plot".into()));
    }
    let path = path.as_ref();
    fs::write(path, boxplot_csv(&rows)).map_err(|e| Error::io(path, e))
}
