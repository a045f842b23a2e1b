//! Overlap and boundary-distance segmentation metrics.
//!
//! Conventions for degenerate masks: two empty masks score Dice = IoU = 1 and
//! zero boundary distance; when exactly one is empty the overlap scores are 0
//! and the boundary metrics are undefined (`None` in [`ClassMetrics`], skipped
//! by the means and counted separately). Ratios with a zero denominator in the
//! confusion-matrix scores are 1, since nothing could be got wrong.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// A binary mask on an `height x width` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::precondition(format!(
                "mask of {} bits on a {height}x{width} grid",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    /// Pixels of `labels` equal to `class`.
    pub fn from_labels(labels: &[u8], height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn at(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.height
            && (c as usize) < self.width
            && self.bits[r as usize * self.width + c as usize]
    }

    /// Foreground pixels with at least one background pixel among their
    /// eight neighbours; the outside of the grid counts as background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height as isize {
            for c in 0..self.width as isize {
                if !self.at(r, c) {
                    continue;
                }
                let interior = (-1..=1).all(|dr| (-1..=1).all(|dc| self.at(r + dr, c + dc)));
                if !interior {
                    out.push((r as usize, c as usize));
                }
            }
        }
        out
    }
}

fn same_grid(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::precondition(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Confusion-matrix scores of one mask pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn overlap_metrics(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    same_grid(pred, gt)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Overlap {
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        acc: ratio(tp + tn, tp + tn + fp + fn_),
        pre: ratio(tp, tp + fp),
        sen: ratio(tp, tp + fn_),
        spe: ratio(tn, tn + fp),
    })
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    // Parabolas rooted at unreachable samples are skipped.
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let Some(top) = k else {
                k = Some(0);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            };
            let p = v[top];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[top] {
                k = top.checked_sub(1);
                continue;
            }
            v[top + 1] = q;
            z[top + 1] = s;
            z[top + 2] = f64::INFINITY;
            k = Some(top + 1);
            break;
        }
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_distance_map(height: usize, width: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; height * width];
    for &(r, c) in seeds {
        grid[r * width + c] = 0.0;
    }
    let n = height.max(width);
    let (mut f, mut v, mut z, mut out) = (vec![0.0; n], vec![0usize; n], vec![0.0; n + 2], vec![0.0; n]);
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        edt_1d(&f[..height], &mut v[..height], &mut z[..height + 2], &mut out[..height]);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut v[..width], &mut z[..width + 2], &mut out[..width]);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

/// Linearly interpolated percentile, `q` in `[0, 100]`, of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (v.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Nearest-boundary distances from each boundary pixel of `a` to the boundary of `b`.
fn directed(a: &[(usize, usize)], b_dist: &[f64], width: usize) -> Vec<f64> {
    a.iter().map(|&(r, c)| b_dist[r * width + c].sqrt()).collect()
}

/// `(hd95, asd)` in units of `spacing`.
///
/// The percentile runs over the union of both directed distance sets; ASD is
/// the mean of that same union.
pub fn boundary_metrics(pred: &Mask, gt: &Mask, spacing: f64) -> Result<(f64, f64)> {
    same_grid(pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok((0.0, 0.0)),
        (true, false) => return Err(Error::UndefinedBoundary("prediction is empty")),
        (false, true) => return Err(Error::UndefinedBoundary("ground truth is empty")),
        _ => {}
    }
    let bp = pred.boundary();
    let bg = gt.boundary();
    let dp = squared_distance_map(pred.height, pred.width, &bp);
    let dg = squared_distance_map(gt.height, gt.width, &bg);
    let mut all = directed(&bp, &dg, pred.width);
    all.extend(directed(&bg, &dp, gt.width));
    let asd = all.iter().sum::<f64>() / all.len() as f64;
    Ok((percentile(&all, 95.0) * spacing, asd * spacing))
}

/// Scores for one foreground class of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub iou: f64,
    /// `None` when exactly one of the masks is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
}

pub fn class_metrics(pred: &Mask, gt: &Mask, spacing: f64) -> Result<ClassMetrics> {
    let o = overlap_metrics(pred, gt)?;
    let (hd95, asd) = match boundary_metrics(pred, gt, spacing) {
        Ok((h, a)) => (Some(h), Some(a)),
        Err(Error::UndefinedBoundary(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(ClassMetrics {
        dice: o.dice,
        iou: o.iou,
        hd95,
        asd,
        acc: o.acc,
        pre: o.pre,
        sen: o.sen,
        spe: o.spe,
    })
}

fn check_labels(pred: &[u8], gt: &[u8], height: usize, width: usize) -> Result<()> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::precondition(format!(
            "label maps of {} and {} pixels on a {height}x{width} grid",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Metrics of classes `1..num_classes` for one label map pair.
pub fn evaluate_labels(
    pred: &[u8],
    gt: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
    spacing: f64,
) -> Result<Vec<ClassMetrics>> {
    check_labels(pred, gt, height, width)?;
    (1..num_classes as u8)
        .map(|k| {
            class_metrics(
                &Mask::from_labels(pred, height, width, k)?,
                &Mask::from_labels(gt, height, width, k)?,
                spacing,
            )
        })
        .collect()
}

/// Dice of each class `1..num_classes`, without the boundary work.
pub fn foreground_dice(pred: &[u8], gt: &[u8], num_classes: usize) -> Vec<f64> {
    let k = num_classes;
    let mut inter = vec![0usize; k];
    let mut np = vec![0usize; k];
    let mut ng = vec![0usize; k];
    for (&p, &g) in pred.iter().zip(gt) {
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    (1..k).map(|c| ratio(2 * inter[c], np[c] + ng[c])).collect()
}

/// One CSV row: a sample, a class and its scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub sample: usize,
    pub class: u8,
    pub metrics: ClassMetrics,
}

pub const CSV_HEADER: &str = "sample,class,dice,iou,hd95,asd,acc,pre,sen,spe";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.sample,
            r.class,
            m.dice,
            m.iou,
            opt(m.hd95),
            opt(m.asd),
            m.acc,
            m.pre,
            m.sen,
            m.spe
        ));
    }
    s
}

pub fn write_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(render_csv(rows).as_bytes())?;
    Ok(())
}

/// Means over the rows of one class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: u8,
    pub samples: usize,
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
    /// Rows whose boundary metrics were undefined.
    pub undefined_boundary: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub classes: Vec<ClassSummary>,
    /// Mean Dice over all foreground classes.
    pub mean_dice: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn summarize(rows: &[MetricsRow]) -> MetricsSummary {
    let mut classes: Vec<u8> = rows.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let classes: Vec<ClassSummary> = classes
        .into_iter()
        .map(|k| {
            let rs: Vec<&ClassMetrics> = rows.iter().filter(|r| r.class == k).map(|r| &r.metrics).collect();
            let m = |f: fn(&ClassMetrics) -> f64| mean(rs.iter().map(|x| f(x))).unwrap_or(f64::NAN);
            ClassSummary {
                class: k,
                samples: rs.len(),
                dice: m(|x| x.dice),
                iou: m(|x| x.iou),
                hd95: mean(rs.iter().filter_map(|x| x.hd95)),
                asd: mean(rs.iter().filter_map(|x| x.asd)),
                acc: m(|x| x.acc),
                pre: m(|x| x.pre),
                sen: m(|x| x.sen),
                spe: m(|x| x.spe),
                undefined_boundary: rs.iter().filter(|x| x.hd95.is_none()).count(),
            }
        })
        .collect();
    let mean_dice = mean(classes.iter().map(|c| c.dice)).unwrap_or(f64::NAN);
    MetricsSummary { classes, mean_dice }
}

pub fn write_summary(summary: &MetricsSummary, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests;
