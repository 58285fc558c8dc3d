//! Per-class overlap and boundary-distance metrics and the CSV report.

use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::error::{Result, WmuError};

pub const CSV_HEADER: &str = "id,class,dice,acc,pre,sen,spe,hd95,asd";

/// One-vs-rest scores of a class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confusion {
    pub dice: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
}

/// All seven measures for one class of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl ClassMetrics {
    pub fn to_array(self) -> [f64; 7] {
        [self.dice, self.acc, self.pre, self.sen, self.spe, self.hd95, self.asd]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        let [dice, acc, pre, sen, spe, hd95, asd] = v;
        Self { dice, acc, pre, sen, spe, hd95, asd }
    }

    pub fn mean(items: &[ClassMetrics]) -> ClassMetrics {
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.to_array()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        ClassMetrics::from_array(acc.map(|v| v / n))
    }
}

fn same_shape(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(WmuError::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// 0/0 counts as a perfect score.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_metrics(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<Confusion> {
    same_shape(pred, gt)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p == class, g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Confusion {
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        acc: ratio(tp + tn, tp + tn + fp + fn_),
        pre: ratio(tp, tp + fp),
        sen: ratio(tp, tp + fn_),
        spe: ratio(tn, tn + fp),
    })
}

/// Class pixels with at least one 4-neighbour outside the class (or outside the image).
pub fn boundary_mask(map: &LabelMap, class: u8) -> Vec<bool> {
    let (h, w) = (map.height, map.width);
    let inside = |y: usize, x: usize| map.data[y * w + x] == class;
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            inside(y, x)
                && (y == 0 || x == 0 || y + 1 == h || x + 1 == w
                    || !inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1))
        })
        .collect()
}

/// Euclidean distance from every `from` pixel to the nearest `to` pixel. `to` must be
/// non-empty. Works in exact integer squared distances.
fn directed_distances(from: &[bool], to: &[bool], h: usize, w: usize) -> Vec<f64> {
    // nearest[x][y]: squared row distance from (y, x) to the closest `to` pixel in column x
    let mut nearest = vec![u64::MAX; w * h];
    for x in 0..w {
        let col = &mut nearest[x * h..(x + 1) * h];
        let mut last: Option<usize> = None;
        for y in 0..h {
            if to[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y] = ((y - l) * (y - l)) as u64;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if to[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y] = col[y].min(((l - y) * (l - y)) as u64);
            }
        }
    }
    let mut out = Vec::new();
    for (i, _) in from.iter().enumerate().filter(|(_, &f)| f) {
        let (y, x) = (i / w, i % w);
        let best = (0..w)
            .filter(|&xx| nearest[xx * h + y] != u64::MAX)
            .map(|xx| nearest[xx * h + y] + (x.abs_diff(xx) * x.abs_diff(xx)) as u64)
            .min()
            .expect("target boundary is non-empty");
        out.push((best as f64).sqrt());
    }
    out
}

/// 95th percentile (nearest rank) and mean of the symmetric boundary distances.
/// One side empty gives the image diagonal for both; both empty gives zeros.
pub fn hd95_asd(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<(f64, f64)> {
    same_shape(pred, gt)?;
    let (h, w) = (gt.height, gt.width);
    let has_p = pred.data.contains(&class);
    let has_g = gt.data.contains(&class);
    match (has_p, has_g) {
        (false, false) => return Ok((0.0, 0.0)),
        (true, false) | (false, true) => {
            let diag = ((h * h + w * w) as f64).sqrt();
            return Ok((diag, diag));
        }
        (true, true) => {}
    }
    let (bp, bg) = (boundary_mask(pred, class), boundary_mask(gt, class));
    let mut d = directed_distances(&bp, &bg, h, w);
    d.extend(directed_distances(&bg, &bp, h, w));
    d.sort_by(f64::total_cmp);
    let rank = (95 * d.len()).div_ceil(100).max(1);
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    Ok((d[rank - 1], asd))
}

pub fn class_metrics(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<ClassMetrics> {
    let c = confusion_metrics(pred, gt, class)?;
    let (hd95, asd) = hd95_asd(pred, gt, class)?;
    Ok(ClassMetrics { dice: c.dice, acc: c.acc, pre: c.pre, sen: c.sen, spe: c.spe, hd95, asd })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub class: String,
    pub metrics: ClassMetrics,
}

/// Per-sample, per-class rows followed by `mean` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    /// Mean over samples and foreground classes.
    pub mean: ClassMetrics,
    /// Mean over samples, per foreground class `1..K`.
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn mean_dice(&self) -> f64 {
        self.mean.dice
    }

    pub fn push_row(&mut self, id: impl Into<String>, class: impl Into<String>, metrics: ClassMetrics) {
        self.rows.push(ReportRow { id: id.into(), class: class.into(), metrics });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{}", r.id, r.class).unwrap();
            for v in r.metrics.to_array() {
                write!(out, ",{v:.4}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Scores predictions against ground truth over foreground classes `1..classes`.
/// `preds`, `gts` and `ids` are aligned.
pub fn evaluate_maps(ids: &[String], preds: &[LabelMap], gts: &[LabelMap], classes: usize) -> Result<MetricsReport> {
    if preds.len() != gts.len() || ids.len() != gts.len() {
        return Err(WmuError::Shape(format!(
            "evaluate: {} ids, {} predictions, {} labels",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let mut report = MetricsReport::default();
    let mut by_class: Vec<Vec<ClassMetrics>> = vec![Vec::new(); classes.saturating_sub(1)];
    for ((id, p), g) in ids.iter().zip(preds).zip(gts) {
        for k in 1..classes {
            let m = class_metrics(p, g, k as u8)?;
            report.push_row(id.clone(), k.to_string(), m);
            by_class[k - 1].push(m);
        }
    }
    report.per_class = by_class.iter().map(|v| ClassMetrics::mean(v)).collect();
    report.mean = ClassMetrics::mean(&report.per_class);
    for (k, m) in report.per_class.clone().into_iter().enumerate() {
        report.push_row("mean", (k + 1).to_string(), m);
    }
    let mean = report.mean;
    report.push_row("mean", "all", mean);
    Ok(report)
}
