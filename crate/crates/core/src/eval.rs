//! Segmentation metrics: Dice overlap and average symmetric surface distance,
//! aggregated per class as mean ± sample standard deviation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::Network;
use crate::netcore::{LabelTensor, Module, NetError};
use crate::taskgen::SegDataset;
use crate::trainer::pseudo_label;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("model predicts {model} classes but the dataset has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("cannot evaluate an empty dataset")]
    Empty,
    #[error(transparent)]
    Net(#[from] NetError),
}

fn check_shapes(pred: &LabelTensor, gt: &LabelTensor) -> Result<(), EvalError> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 {
        return Err(EvalError::ShapeMismatch(pred.shape().to_vec(), gt.shape().to_vec()));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` for `P = {pred == c}`, `G = {gt == c}`; 1.0 when both are empty.
pub fn dice(pred: &LabelTensor, gt: &LabelTensor, class: u8) -> Result<f64, EvalError> {
    check_shapes(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == class, g == class);
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Pixels of `{mask == class}` with a 4-neighbour outside the set (the image border counts as outside).
pub fn boundary(mask: &LabelTensor, class: u8) -> Vec<bool> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask.data()[y as usize * w + x as usize] == class
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) && [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].iter().any(|&(a, b)| !inside(a, b)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

const FAR: i64 = i64::MAX / 4;

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher), exact in integers.
fn edt_1d(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let sites: Vec<usize> = (0..n).filter(|&q| f[q] < FAR).collect();
    if sites.is_empty() {
        out.fill(FAR);
        return;
    }
    v[0] = sites[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| -> f64 {
        let (q, p) = (q as i64, p as i64);
        ((f[q as usize] + q * q) - (f[p as usize] + p * p)) as f64 / (2 * (q - p)) as f64
    };
    for &q in &sites[1..] {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
fn squared_distance_transform(set: &[bool], h: usize, w: usize) -> Vec<i64> {
    let mut cols = vec![0i64; h * w];
    let mut f = vec![0i64; h];
    let mut d = vec![0i64; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if set[y * w + x] { 0 } else { FAR };
        }
        edt_1d(&f, &mut d);
        for y in 0..h {
            cols[y * w + x] = d[y];
        }
    }
    let mut out = vec![0i64; h * w];
    for y in 0..h {
        edt_1d(&cols[y * w..(y + 1) * w], &mut out[y * w..(y + 1) * w]);
    }
    out
}

/// Average symmetric surface distance between the class-`class` regions of `pred` and `gt`,
/// in pixels; `None` when either region is empty.
pub fn asd(pred: &LabelTensor, gt: &LabelTensor, class: u8) -> Result<Option<f64>, EvalError> {
    check_shapes(pred, gt)?;
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let (bp, bg) = (boundary(pred, class), boundary(gt, class));
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    if np == 0 || ng == 0 {
        return Ok(None);
    }
    let (to_g, to_p) = (squared_distance_transform(&bg, h, w), squared_distance_transform(&bp, h, w));
    // One partial sum per direction keeps asd(P, G) and asd(G, P) bit-identical.
    let directed = |from: &[bool], to: &[i64]| -> f64 {
        from.iter().zip(to).filter(|(&b, _)| b).map(|(_, &d)| (d as f64).sqrt()).sum()
    };
    Ok(Some((directed(&bp, &to_g) + directed(&bg, &to_p)) / (np + ng) as f64))
}

/// Mean and `n−1` standard deviation; `None` for no values, std 0 for a single value.
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
    /// Samples with a defined ASD for this class.
    pub asd_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_classes: usize,
    /// Foreground classes `1..K`.
    pub classes: Vec<ClassMetrics>,
    /// Mean ± std over samples of the per-sample foreground-average Dice.
    pub dice_avg_mean: f64,
    pub dice_avg_std: f64,
    /// Same for ASD, over samples with at least one defined foreground ASD.
    pub asd_avg_mean: Option<f64>,
    pub asd_avg_std: Option<f64>,
    pub n_samples: usize,
    /// (sample, class) pairs whose ASD was undefined.
    pub n_asd_excluded: usize,
}

/// Aggregates per-sample metrics for `[H, W]` prediction/ground-truth pairs.
pub fn report_from_predictions(
    preds: &[LabelTensor],
    gts: &[LabelTensor],
    num_classes: usize,
) -> Result<MetricReport, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if preds.len() != gts.len() {
        return Err(EvalError::ShapeMismatch(vec![preds.len()], vec![gts.len()]));
    }
    let fg = 1..num_classes;
    let mut dice_by_class = vec![Vec::new(); num_classes];
    let mut asd_by_class = vec![Vec::new(); num_classes];
    let (mut dice_avg, mut asd_avg, mut excluded) = (Vec::new(), Vec::new(), 0usize);
    for (p, g) in preds.iter().zip(gts) {
        let (mut dsum, mut asum, mut acount) = (0.0, 0.0, 0usize);
        for c in fg.clone() {
            let d = dice(p, g, c as u8)?;
            dice_by_class[c].push(d);
            dsum += d;
            match asd(p, g, c as u8)? {
                Some(a) => {
                    asd_by_class[c].push(a);
                    asum += a;
                    acount += 1;
                }
                None => excluded += 1,
            }
        }
        dice_avg.push(dsum / (num_classes - 1) as f64);
        if acount > 0 {
            asd_avg.push(asum / acount as f64);
        }
    }
    let classes = fg
        .map(|c| {
            let (dice_mean, dice_std) = mean_std(&dice_by_class[c]).expect("one value per sample");
            let asd = mean_std(&asd_by_class[c]);
            ClassMetrics {
                class: c,
                dice_mean,
                dice_std,
                asd_mean: asd.map(|a| a.0),
                asd_std: asd.map(|a| a.1),
                asd_count: asd_by_class[c].len(),
            }
        })
        .collect();
    let (dice_avg_mean, dice_avg_std) = mean_std(&dice_avg).expect("non-empty");
    let asd_avg = mean_std(&asd_avg);
    Ok(MetricReport {
        num_classes,
        classes,
        dice_avg_mean,
        dice_avg_std,
        asd_avg_mean: asd_avg.map(|a| a.0),
        asd_avg_std: asd_avg.map(|a| a.1),
        n_samples: preds.len(),
        n_asd_excluded: excluded,
    })
}

/// Batch size used when running a model over a dataset for evaluation.
pub const EVAL_BATCH: usize = 8;

/// Per-pixel argmax predictions of `model` (after `adapter`, when given) for every sample.
pub fn predict_dataset(
    model: &Network,
    adapter: Option<&Network>,
    dataset: &SegDataset,
) -> Result<Vec<LabelTensor>, EvalError> {
    let k = model.arch().out_channels();
    if k != dataset.num_classes() {
        return Err(EvalError::ClassMismatch { model: k, data: dataset.num_classes() });
    }
    let mut preds = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (mut x, _) = dataset.batch(chunk).map_err(|e| match e {
            crate::taskgen::DataError::Net(n) => EvalError::Net(n),
            other => EvalError::Net(NetError::Invalid(other.to_string())),
        })?;
        if let Some(a) = adapter {
            x = a.predict(&x)?;
        }
        let labels = pseudo_label(&model.predict(&x)?)?;
        preds.extend((0..chunk.len()).map(|i| labels.plane(i)));
    }
    Ok(preds)
}

/// Evaluates `model` (composed after `adapter` when given) on a labeled dataset.
pub fn evaluate(model: &Network, adapter: Option<&Network>, dataset: &SegDataset) -> Result<MetricReport, EvalError> {
    let preds = predict_dataset(model, adapter, dataset)?;
    let gts: Vec<LabelTensor> = dataset.samples.iter().map(|s| s.mask.clone()).collect();
    report_from_predictions(&preds, &gts, dataset.num_classes())
}

fn fmt_pm(mean: Option<f64>, std: Option<f64>, scale: f64) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", m * scale, s * scale),
        _ => "n/a".to_string(),
    }
}

/// Plain-text table with one row per method: Dice (%) per foreground class and
/// average, then ASD (pixels) per class and average.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let Some((_, first)) = rows.first() else { return String::new() };
    let mut header = vec!["Method".to_string()];
    for c in &first.classes {
        header.push(format!("Dice c{}", c.class));
    }
    header.push("Dice Avg".into());
    for c in &first.classes {
        header.push(format!("ASD c{}", c.class));
    }
    header.push("ASD Avg".into());
    let mut table = vec![header];
    for (name, r) in rows {
        let mut row = vec![name.clone()];
        row.extend(r.classes.iter().map(|c| fmt_pm(Some(c.dice_mean), Some(c.dice_std), 100.0)));
        row.push(fmt_pm(Some(r.dice_avg_mean), Some(r.dice_avg_std), 100.0));
        row.extend(r.classes.iter().map(|c| fmt_pm(c.asd_mean, c.asd_std, 1.0)));
        row.push(fmt_pm(r.asd_avg_mean, r.asd_avg_std, 1.0));
        table.push(row);
    }
    let widths: Vec<usize> =
        (0..table[0].len()).map(|j| table.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> =
            row.iter().zip(&widths).map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        }
    }
    out
}
