//! Dice evaluation, per-region statistics against the 0.7 guideline,
//! box-plot export and leave-one-out orchestration.
//!
//! Conventions: standard deviations are population (divide by n); the median
//! of an even sample is the mean of the central pair; quartiles are Tukey
//! hinges; a region absent from both masks scores 1.0, is flagged
//! `both_empty` and is left out of the aggregates. Statistics pool frames.

mod boxplot;
mod loocv;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use boxplot::{box_stats, boxplot_csv, boxplot_export, boxplot_rows, BoxRow, BOXPLOT_HEADER};
pub use loocv::{
    baseline_predict, load_case_list, loocv_plan, run_loocv, CaseRef, Fold, FoldRecord, FoldStatus, LoocvOptions,
    LoocvPlan, PredictorKind, PredictorSpec,
};

use crate::volcore::{LabelMap, Mask, RegionCode, Sequence4D};
use crate::{Error, Result, TOOLKIT_VERSION};

/// Dice value regarded as a practical lower bound for usable segmentations.
pub const GUIDELINE: f64 = 0.7;

/// Dice with the underlying integer counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceValue {
    pub dice: f64,
    pub intersection: usize,
    pub a_voxels: usize,
    pub b_voxels: usize,
    pub both_empty: bool,
}

impl DiceValue {
    pub fn from_counts(intersection: usize, a_voxels: usize, b_voxels: usize) -> Self {
        let both_empty = a_voxels + b_voxels == 0;
        let dice = if both_empty { 1.0 } else { 2.0 * intersection as f64 / (a_voxels + b_voxels) as f64 };
        DiceValue { dice, intersection, a_voxels, b_voxels, both_empty }
    }
}

/// `2|A∩B| / (|A|+|B|)`.
pub fn dice(a: &Mask, b: &Mask) -> Result<DiceValue> {
    a.geometry().ensure_same(b.geometry(), "dice operands")?;
    let (mut i, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        na += usize::from(x);
        nb += usize::from(y);
        i += usize::from(x && y);
    }
    Ok(DiceValue::from_counts(i, na, nb))
}

/// Dice of every region code between two label maps, in one pass.
pub fn dice_labels(gt: &LabelMap, pred: &LabelMap) -> Result<[DiceValue; 10]> {
    gt.geometry().ensure_same(pred.geometry(), "dice label maps")?;
    let mut inter = [0usize; 256];
    let mut ng = [0usize; 256];
    let mut np = [0usize; 256];
    for (&g, &p) in gt.codes().iter().zip(pred.codes()) {
        ng[g as usize] += 1;
        np[p as usize] += 1;
        if g == p {
            inter[g as usize] += 1;
        }
    }
    Ok(std::array::from_fn(|c| DiceValue::from_counts(inter[c], ng[c], np[c])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceEntry {
    pub case_id: String,
    pub frame_index: usize,
    pub region: RegionCode,
    pub dice: f64,
    pub gt_voxels: usize,
    pub pred_voxels: usize,
    pub both_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub case_id: String,
    pub frame_index: usize,
}

/// Statistics of one region over its non-both-empty entries. `median` and
/// `std` are null when no entry qualifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAggregate {
    pub count: usize,
    pub median: Option<f64>,
    pub std: Option<f64>,
    pub both_empty: usize,
    pub below_guideline: Vec<FrameRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub std: String,
    pub median: String,
    pub quartiles: String,
    pub both_empty: String,
    pub pooling: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            std: "population (divide by n)".into(),
            median: "mean of the two central values for even n".into(),
            quartiles: "Tukey hinges (median of each half, the median belongs to both halves for odd n)".into(),
            both_empty: "dice 1.0, flagged, excluded from aggregates".into(),
            pooling: "per frame".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub toolkit_version: String,
    pub conventions: Conventions,
    pub guideline: f64,
    pub entries: Vec<DiceEntry>,
    /// Keyed by region name.
    pub aggregates: BTreeMap<String, RegionAggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldRecord>,
}

impl DiceReport {
    pub fn from_entries(entries: Vec<DiceEntry>) -> Self {
        let aggregates = aggregate(&entries);
        DiceReport {
            toolkit_version: TOOLKIT_VERSION.into(),
            conventions: Conventions::default(),
            guideline: GUIDELINE,
            entries,
            aggregates,
            folds: Vec::new(),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Non-both-empty Dice values of one region, in entry order.
    pub fn values(&self, region: RegionCode) -> Vec<f64> {
        self.entries.iter().filter(|e| e.region == region && !e.both_empty).map(|e| e.dice).collect()
    }

    /// Plain-text table of the aggregates in region-code order.
    pub fn format_table(&self) -> String {
        let rows = RegionCode::ALL
            .iter()
            .filter_map(|r| self.aggregates.get(r.name()).map(|a| (r.name(), a)));
        format_aggregates(rows, self.guideline)
    }
}

/// Region statistics recomputed from raw entries.
pub fn aggregate(entries: &[DiceEntry]) -> BTreeMap<String, RegionAggregate> {
    let mut by_region: BTreeMap<RegionCode, Vec<&DiceEntry>> = BTreeMap::new();
    for e in entries {
        by_region.entry(e.region).or_default().push(e);
    }
    by_region
        .into_iter()
        .map(|(r, es)| {
            let vals: Vec<f64> = es.iter().filter(|e| !e.both_empty).map(|e| e.dice).collect();
            let mut below: Vec<FrameRef> = es
                .iter()
                .filter(|e| !e.both_empty && e.dice < GUIDELINE)
                .map(|e| FrameRef { case_id: e.case_id.clone(), frame_index: e.frame_index })
                .collect();
            below.sort();
            let agg = RegionAggregate {
                count: vals.len(),
                median: median(&vals),
                std: population_std(&vals),
                both_empty: es.len() - vals.len(),
                below_guideline: below,
            };
            (r.name().to_string(), agg)
        })
        .collect()
}

/// Two decimals, as Dice values are conventionally reported.
fn fmt2(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

/// Renders `(region, aggregate)` rows as a fixed-width table.
pub fn format_aggregates<'a>(rows: impl IntoIterator<Item = (&'a str, &'a RegionAggregate)>, guideline: f64) -> String {
    let mut out = format!(
        "{:<20} {:>6} {:>8} {:>8} {:>8}\n",
        "region",
        "n",
        "median",
        "std",
        format!("<{guideline}")
    );
    for (name, a) in rows {
        out += &format!(
            "{:<20} {:>6} {:>8} {:>8} {:>8}\n",
            name,
            a.count,
            fmt2(a.median),
            fmt2(a.std),
            a.below_guideline.len()
        );
    }
    out += &format!("guideline: {guideline}\n");
    out
}

pub fn median(v: &[f64]) -> Option<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    median_sorted(&s)
}

fn median_sorted(s: &[f64]) -> Option<f64> {
    let n = s.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(s[n / 2]),
        _ => Some((s[n / 2 - 1] + s[n / 2]) / 2.0),
    }
}

/// Tukey hinges `(q1, median, q3)`.
pub fn quartiles(v: &[f64]) -> Option<(f64, f64, f64)> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let half = n.div_ceil(2);
    Some((median_sorted(&s[..half])?, median_sorted(&s)?, median_sorted(&s[n - half..])?))
}

pub fn population_std(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    Some((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// One entry per (frame, region), frames in parallel. `case_id` is taken
/// from the ground truth.
pub fn dice_report(gt: &Sequence4D, pred: &Sequence4D, regions: &[RegionCode]) -> Result<DiceReport> {
    let pred_labels = pred.label_maps()?;
    Ok(DiceReport::from_entries(dice_entries(gt, &pred_labels, regions)?))
}

/// Entries for predicted label maps against a labeled case.
pub fn dice_entries(gt: &Sequence4D, pred: &[&LabelMap], regions: &[RegionCode]) -> Result<Vec<DiceEntry>> {
    if gt.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "frame count mismatch: ground truth has {}, prediction {}",
            gt.len(),
            pred.len()
        )));
    }
    let gt_labels = gt.label_maps()?;
    let per_frame = gt_labels
        .par_iter()
        .zip(pred.par_iter())
        .enumerate()
        .map(|(f, (g, p))| {
            let d = dice_labels(g, p)?;
            Ok(regions
                .iter()
                .map(|&r| {
                    let v = d[r.code() as usize];
                    DiceEntry {
                        case_id: gt.case_id.clone(),
                        frame_index: f,
                        region: r,
                        dice: v.dice,
                        gt_voxels: v.a_voxels,
                        pred_voxels: v.b_voxels,
                        both_empty: v.both_empty,
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}
