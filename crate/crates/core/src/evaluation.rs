//! Anomaly maps, pixel-level detection metrics, segmentation overlap and
//! rank aggregation.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{contract, domain, Error, Result};
use crate::synthdata::PhantomSpec;
use crate::tensor::Tensor;

/// `|pathological − counterfactual|` followed by a median filter over the
/// `(2r+1)²` window clipped to the image (`r = 0` disables it).
pub fn anomaly_map(pathological: &Tensor, counterfactual: &Tensor, smooth_radius: usize) -> Result<Tensor> {
    pathological.ensure_same_shape(counterfactual, "anomaly_map")?;
    let diff = pathological.zip_map(counterfactual, |a, b| (a - b).abs());
    if smooth_radius == 0 {
        return Ok(diff);
    }
    let shape = diff.shape();
    contract!(shape.len() == 2, "median filtering needs a 2D map, got {shape:?}");
    let (h, w) = (shape[0], shape[1]);
    let r = smooth_radius;
    let src = diff.data();
    let mut out = vec![0.0; h * w];
    let mut window = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                window.extend_from_slice(&src[yy * w + x.saturating_sub(r)..yy * w + (x + r + 1).min(w)]);
            }
            let mid = (window.len() - 1) / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            out[y * w + x] = *m;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn binary(mask: &Tensor, what: &str) -> Result<Vec<bool>> {
    mask.data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::Contract(format!("{what} is not binary (found {v})")))
            }
        })
        .collect()
}

fn dice_counts(inter: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(gt, "dice")?;
    let (p, g) = (binary(pred, "prediction")?, binary(gt, "ground truth")?);
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    Ok(dice_counts(
        inter,
        p.iter().filter(|&&v| v).count(),
        g.iter().filter(|&&v| v).count(),
    ))
}

fn empty_threshold(max: f64) -> f64 {
    max.next_up()
}

fn check_map(map: &Tensor) -> Result<()> {
    contract!(
        map.data().iter().all(|v| v.is_finite() && *v >= 0.0),
        "anomaly map values must be finite and non-negative"
    );
    Ok(())
}

/// Best Dice of `{map ≥ τ}` against `gt` over τ ∈ {0} ∪ unique values ∪
/// {max + ε}; ties go to the higher threshold.
pub fn max_dice_per_sample(map: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    map.ensure_same_shape(gt, "max_dice_per_sample")?;
    check_map(map)?;
    let g = binary(gt, "ground truth")?;
    let n_gt = g.iter().filter(|&&v| v).count();
    let mut order: Vec<usize> = (0..g.len()).collect();
    let vals = map.data();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let max = vals[order[0]];
    let mut best = (dice_counts(0, 0, n_gt), empty_threshold(max));
    let (mut tp, mut pos) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let tau = vals[order[k]];
        while k < order.len() && vals[order[k]] == tau {
            tp += g[order[k]] as usize;
            pos += 1;
            k += 1;
        }
        let d = dice_counts(tp, pos, n_gt);
        if d > best.0 {
            best = (d, tau);
        }
    }
    // τ = 0 selects everything, which the smallest value already did
    // unless all values are positive.
    let d0 = dice_counts(n_gt, g.len(), n_gt);
    if d0 > best.0 {
        best = (d0, 0.0);
    }
    Ok(best)
}

/// Mid-ranks (1-based) of `scores`, averaging over ties.
fn mid_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut ranks = vec![0.0; scores.len()];
    let mut k = 0;
    while k < order.len() {
        let mut e = k;
        while e + 1 < order.len() && scores[order[e + 1]] == scores[order[k]] {
            e += 1;
        }
        let r = 0.5 * ((k + 1) + (e + 1)) as f64;
        for &i in &order[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney statistic with mid-ranks.
pub fn auc_pix(scores: &[f64], labels: &[bool]) -> Result<f64> {
    contract!(scores.len() == labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    domain!(n_pos > 0 && n_neg > 0, "AUC needs both positive and negative pixels");
    let ranks = mid_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((r_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `Σ_k (R_k − R_{k−1}) P_k` over distinct score
/// thresholds taken from the highest down.
pub fn ap_pix(scores: &[f64], labels: &[bool]) -> Result<f64> {
    contract!(scores.len() == labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    domain!(n_pos > 0, "average precision needs at least one positive pixel");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut k = 0;
    while k < order.len() {
        let tau = scores[order[k]];
        while k < order.len() && scores[order[k]] == tau {
            tp += labels[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

fn mean_dice_at(maps: &[Tensor], gts: &[Vec<bool>], tau: f64) -> f64 {
    let sum: f64 = maps
        .iter()
        .zip(gts)
        .map(|(m, g)| {
            let (mut inter, mut a, mut b) = (0, 0, 0);
            for (&v, &gv) in m.data().iter().zip(g) {
                let p = v >= tau;
                inter += (p && gv) as usize;
                a += p as usize;
                b += gv as usize;
            }
            dice_counts(inter, a, b)
        })
        .sum();
    sum / maps.len() as f64
}

/// Picks the single threshold maximizing the cohort-mean Dice (ties to the
/// higher threshold) and returns `(FPR, threshold)` with FPR pooled over
/// every pixel. A cohort without negative pixels has FPR 0.
pub fn fpr_at_global_threshold(maps: &[Tensor], gts: &[Tensor]) -> Result<(f64, f64)> {
    contract!(!maps.is_empty(), "cohort is empty");
    contract!(
        maps.len() == gts.len(),
        "cohort has {} maps but {} masks",
        maps.len(),
        gts.len()
    );
    let mut masks = Vec::with_capacity(gts.len());
    for (m, g) in maps.iter().zip(gts) {
        m.ensure_same_shape(g, "fpr_at_global_threshold")?;
        check_map(m)?;
        masks.push(binary(g, "ground truth")?);
    }
    // Sweep all pixels from the highest value down, tracking each sample's
    // Dice incrementally; candidates are re-scored exactly below.
    let mut pixels: Vec<(f64, u32, bool)> = Vec::new();
    for (s, (m, g)) in maps.iter().zip(&masks).enumerate() {
        pixels.extend(m.data().iter().zip(g).map(|(&v, &gv)| (v, s as u32, gv)));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_gt: Vec<usize> = masks.iter().map(|g| g.iter().filter(|&&v| v).count()).collect();
    let mut tp = vec![0usize; maps.len()];
    let mut pos = vec![0usize; maps.len()];
    let mut total: f64 = n_gt.iter().map(|&b| dice_counts(0, 0, b)).sum();
    let mut scored = vec![(total, empty_threshold(pixels[0].0))];
    let mut k = 0;
    while k < pixels.len() {
        let tau = pixels[k].0;
        while k < pixels.len() && pixels[k].0 == tau {
            let (_, s, gv) = pixels[k];
            let s = s as usize;
            let before = dice_counts(tp[s], pos[s], n_gt[s]);
            tp[s] += gv as usize;
            pos[s] += 1;
            total += dice_counts(tp[s], pos[s], n_gt[s]) - before;
            k += 1;
        }
        scored.push((total, tau));
    }
    if pixels.last().is_some_and(|p| p.0 > 0.0) {
        scored.push((total, 0.0));
    }
    let top = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let slack = 1e-9 * maps.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    for &(approx, tau) in &scored {
        if approx + slack < top {
            continue;
        }
        let exact = mean_dice_at(maps, &masks, tau);
        if best.is_none_or(|(d, _)| exact > d) {
            best = Some((exact, tau));
        }
    }
    let tau = best.expect("at least one candidate").1;
    let (mut fp, mut neg) = (0usize, 0usize);
    for (m, g) in maps.iter().zip(&masks) {
        for (&v, &gv) in m.data().iter().zip(g) {
            if !gv {
                neg += 1;
                fp += (v >= tau) as usize;
            }
        }
    }
    let fpr = if neg == 0 { 0.0 } else { fp as f64 / neg as f64 };
    Ok((fpr, tau))
}

/// Nearest-class-center segmentation of an image in `[0, 1]`.
pub fn toy_segment(image: &Tensor, spec: &PhantomSpec) -> Tensor {
    let centers = spec.class_centers();
    image.map(|v| {
        let mut best = 0;
        for (k, c) in centers.iter().enumerate() {
            if (v - c).abs() < (v - centers[best]).abs() {
                best = k;
            }
        }
        best as f64
    })
}

/// Mean Dice per tissue class (classes `1..K`, background excluded) between
/// segmentations of the reference images and of the counterfactuals. Images
/// where a class appears in neither segmentation do not count toward that
/// class; a class absent from the whole cohort scores 1.
pub fn region_dice_table(gt_healthy: &[Tensor], counterfactuals: &[Tensor], spec: &PhantomSpec) -> Result<Vec<f64>> {
    contract!(!gt_healthy.is_empty(), "cohort is empty");
    contract!(
        gt_healthy.len() == counterfactuals.len(),
        "cohort sizes differ: {} vs {}",
        gt_healthy.len(),
        counterfactuals.len()
    );
    let k = spec.n_classes();
    let per: Vec<Vec<Option<f64>>> = gt_healthy
        .par_iter()
        .zip(counterfactuals)
        .map(|(g, c)| {
            g.ensure_same_shape(c, "region_dice_table")?;
            let (sg, sc) = (toy_segment(g, spec), toy_segment(c, spec));
            Ok((1..k)
                .map(|class| {
                    let cls = class as f64;
                    let (mut inter, mut a, mut b) = (0, 0, 0);
                    for (&x, &y) in sg.data().iter().zip(sc.data()) {
                        inter += (x == cls && y == cls) as usize;
                        a += (x == cls) as usize;
                        b += (y == cls) as usize;
                    }
                    (a + b > 0).then(|| dice_counts(inter, a, b))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..k - 1)
        .map(|j| {
            let vals: Vec<f64> = per.iter().filter_map(|row| row[j]).collect();
            if vals.is_empty() {
                1.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect())
}

/// Ranks methods per metric (1 = best; tied methods share the mean of their
/// ranks) and averages across metrics.
pub fn average_rank(table: &[(String, Vec<f64>)], higher_is_better: &[bool]) -> Result<Vec<(String, f64)>> {
    contract!(table.len() >= 2, "ranking needs at least two methods");
    for (name, row) in table {
        contract!(
            row.len() == higher_is_better.len(),
            "method `{name}` has {} metrics, expected {}",
            row.len(),
            higher_is_better.len()
        );
        contract!(row.iter().all(|v| !v.is_nan()), "method `{name}` has missing entries");
    }
    let m = higher_is_better.len();
    contract!(m >= 1, "ranking needs at least one metric");
    let mut sums = vec![0.0; table.len()];
    for (j, &hib) in higher_is_better.iter().enumerate() {
        let col: Vec<f64> = table.iter().map(|(_, r)| if hib { -r[j] } else { r[j] }).collect();
        for (s, r) in sums.iter_mut().zip(mid_ranks(&col)) {
            *s += r;
        }
    }
    Ok(table
        .iter()
        .zip(sums)
        .map(|((n, _), s)| (n.clone(), s / m as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub max_dice: f64,
    pub best_threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub rows: Vec<SampleRow>,
    pub mean_max_dice: f64,
    pub ap_pix: Option<f64>,
    pub auc_pix: Option<f64>,
    pub fpr: f64,
    pub fpr_threshold: f64,
    /// Mean Dice per tissue class.
    pub region_dice: Vec<f64>,
    pub rank: f64,
    /// Metrics that were undefined for this cohort, with the reason.
    pub notes: Vec<String>,
}

/// One evaluated case: `(id, pathological, counterfactual, lesion mask,
/// healthy reference)`.
pub struct Case<'a> {
    pub id: &'a str,
    pub pathological: &'a Tensor,
    pub counterfactual: &'a Tensor,
    pub lesion_mask: &'a Tensor,
    pub healthy: &'a Tensor,
}

/// Computes every anomaly and segmentation metric for one method.
pub fn evaluate_cohort(
    method: &str,
    cases: &[Case],
    spec: &PhantomSpec,
    smooth_radius: usize,
) -> Result<MetricsReport> {
    contract!(!cases.is_empty(), "cohort is empty");
    let maps: Vec<Tensor> = cases
        .par_iter()
        .map(|c| anomaly_map(c.pathological, c.counterfactual, smooth_radius))
        .collect::<Result<_>>()?;
    let rows: Vec<SampleRow> = cases
        .par_iter()
        .zip(&maps)
        .map(|(c, m)| {
            let (d, t) = max_dice_per_sample(m, c.lesion_mask)?;
            Ok(SampleRow {
                id: c.id.to_string(),
                max_dice: d,
                best_threshold: t,
            })
        })
        .collect::<Result<_>>()?;
    let mean_max_dice = rows.iter().map(|r| r.max_dice).sum::<f64>() / rows.len() as f64;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let labels: Vec<bool> = cases
        .iter()
        .flat_map(|c| c.lesion_mask.data().iter().map(|&v| v != 0.0))
        .collect();
    let mut notes = Vec::new();
    let mut defined = |r: Result<f64>, what: &str| match r {
        Ok(v) => Some(v),
        Err(Error::Domain(msg)) => {
            notes.push(format!("{what} undefined: {msg}"));
            None
        }
        Err(e) => {
            notes.push(format!("{what} failed: {e}"));
            None
        }
    };
    let ap = defined(ap_pix(&scores, &labels), "AP_pix");
    let auc = defined(auc_pix(&scores, &labels), "AUC_pix");
    let gts: Vec<Tensor> = cases.iter().map(|c| c.lesion_mask.clone()).collect();
    let (fpr, fpr_threshold) = fpr_at_global_threshold(&maps, &gts)?;
    let healthy: Vec<Tensor> = cases.iter().map(|c| c.healthy.clone()).collect();
    let cfs: Vec<Tensor> = cases.iter().map(|c| c.counterfactual.clone()).collect();
    let region_dice = region_dice_table(&healthy, &cfs, spec)?;
    Ok(MetricsReport {
        method: method.to_string(),
        rows,
        mean_max_dice,
        ap_pix: ap,
        auc_pix: auc,
        fpr,
        fpr_threshold,
        region_dice,
        rank: 1.0,
        notes,
    })
}

/// Fills `rank` across reports from Dice, AP_pix and AUC_pix (higher is
/// better) and FPR (lower is better). Undefined metrics rank last.
pub fn assign_ranks(reports: &mut [MetricsReport]) -> Result<()> {
    if reports.len() < 2 {
        reports.iter_mut().for_each(|r| r.rank = 1.0);
        return Ok(());
    }
    let table: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|r| {
            (
                r.method.clone(),
                vec![
                    r.mean_max_dice,
                    r.ap_pix.unwrap_or(f64::NEG_INFINITY),
                    r.auc_pix.unwrap_or(f64::NEG_INFINITY),
                    r.fpr,
                ],
            )
        })
        .collect();
    let ranks = average_rank(&table, &[true, true, true, false])?;
    for (r, (_, rank)) in reports.iter_mut().zip(ranks) {
        r.rank = rank;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    /// Per-sample rows followed by aggregate footer rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,max_dice,best_threshold\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.id, r.max_dice, r.best_threshold));
        }
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        out.push_str(&format!("#mean_max_dice,{},\n", self.mean_max_dice));
        out.push_str(&format!("#ap_pix,{},\n", opt(self.ap_pix)));
        out.push_str(&format!("#auc_pix,{},\n", opt(self.auc_pix)));
        out.push_str(&format!("#fpr,{},{}\n", self.fpr, self.fpr_threshold));
        out.push_str(&format!("#rank,{},\n", self.rank));
        for (k, d) in self.region_dice.iter().enumerate() {
            out.push_str(&format!("#region_dice_class_{},{},\n", k + 1, d));
        }
        out
    }

    pub fn summary_header() -> String {
        format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>6}",
            "Method", "Dice", "AP_pix", "AUC_pix", "FPR", "Rank"
        )
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{:<16} {:>8.4} {:>8} {:>8} {:>8.4} {:>6.2}",
            self.method,
            self.mean_max_dice,
            fmt_opt(self.ap_pix),
            fmt_opt(self.auc_pix),
            self.fpr,
            self.rank
        )
    }

    pub fn write(&self, csv_path: &Path, summary_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let mut f = std::fs::File::create(summary_path).map_err(|e| Error::io(summary_path, e))?;
        let mut text = format!("{}\n{}\n", Self::summary_header(), self.summary_line());
        text.push_str("\nRegion Dice:");
        for (k, d) in self.region_dice.iter().enumerate() {
            text.push_str(&format!(" class{}={:.4}", k + 1, d));
        }
        text.push('\n');
        for n in &self.notes {
            text.push_str(&format!("note: {n}\n"));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(summary_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn mask(shape: &[usize], on: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for &i in on {
            t.data_mut()[i] = 1.0;
        }
        t
    }

    #[test]
    fn anomaly_map_basics() {
        let p = Tensor::new(vec![5, 5], (0..25).map(|i| i as f64 / 25.0).collect()).unwrap();
        assert!(anomaly_map(&p, &p, 1).unwrap().data().iter().all(|&v| v == 0.0));
        let mut c = p.clone();
        c.data_mut()[12] += 0.25;
        let raw = anomaly_map(&p, &c, 0).unwrap();
        assert_eq!(raw.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert!((raw.data()[12] - 0.25).abs() < 1e-15);
        assert!(anomaly_map(&p, &c, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(anomaly_map(&p, &Tensor::zeros(&[4, 4]), 0).is_err());
    }

    #[test]
    fn dice_examples() {
        let s = [2, 2];
        let a = mask(&s, &[0, 1]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(&s, &[2, 3])).unwrap(), 0.0);
        assert_eq!(dice(&a, &mask(&s, &[1, 2])).unwrap(), 0.5);
        assert_eq!(dice(&mask(&s, &[]), &mask(&s, &[])).unwrap(), 1.0);
        let mut bad = a.clone();
        bad.data_mut()[0] = 0.5;
        assert!(dice(&bad, &a).is_err());
    }

    #[test]
    fn max_dice_examples() {
        let gt = mask(&[4, 4], &[1, 5, 6]);
        assert_eq!(max_dice_per_sample(&gt, &gt).unwrap().0, 1.0);
        let constant = Tensor::full(&[4, 4], 0.3);
        let (d, t) = max_dice_per_sample(&constant, &gt).unwrap();
        assert_eq!(d, 2.0 * 3.0 / (3.0 + 16.0));
        assert!(t <= 0.3);
    }

    #[test]
    fn auc_ap_examples() {
        let l = [true, false, true, false];
        assert_eq!(auc_pix(&[0.9, 0.4, 0.6, 0.1], &l).unwrap(), 1.0);
        assert_eq!(ap_pix(&[0.9, 0.4, 0.6, 0.1], &l).unwrap(), 1.0);
        assert_eq!(auc_pix(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(auc_pix(&[0.1, 0.2], &[true, true]), Err(Error::Domain(_))));
        assert!(matches!(ap_pix(&[0.1, 0.2], &[false, false]), Err(Error::Domain(_))));
        // One negative ranked between two positives: P = 1 at R = 1/2, 2/3 at R = 1.
        let ap = ap_pix(&[0.9, 0.5, 0.3], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn fpr_examples() {
        let gts = vec![mask(&[3, 3], &[0, 1]), mask(&[3, 3], &[4])];
        assert_eq!(fpr_at_global_threshold(&gts, &gts).unwrap().0, 0.0);
        let ones = vec![Tensor::full(&[3, 3], 1.0); 2];
        assert_eq!(fpr_at_global_threshold(&ones, &gts).unwrap().0, 1.0);
    }

    #[test]
    fn segmentation_examples() {
        let spec = PhantomSpec {
            texture_noise_sd: 0.0,
            ..PhantomSpec::default()
        };
        for seed in 0..20 {
            let (img, label) = crate::synthdata::generate_phantom(&mut RngStream::new(seed, 0), &spec).unwrap();
            assert!(toy_segment(&img, &spec).bitwise_eq(&label));
        }
        let bg = Tensor::full(&[8, 8], spec.background_level);
        assert!(toy_segment(&bg, &spec).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn textured_segmentation_agrees() {
        let spec = PhantomSpec::default();
        let (mut agree, mut total) = (0usize, 0usize);
        for seed in 0..100 {
            let (img, label) = crate::synthdata::generate_phantom(&mut RngStream::new(seed, 0), &spec).unwrap();
            let seg = toy_segment(&img, &spec);
            agree += seg.data().iter().zip(label.data()).filter(|(a, b)| a == b).count();
            total += img.numel();
        }
        let frac = agree as f64 / total as f64;
        assert!(frac >= 0.99, "agreement {frac}");
    }

    #[test]
    fn region_dice_examples() {
        let spec = PhantomSpec::default();
        let imgs: Vec<Tensor> = (0..10)
            .map(|s| {
                crate::synthdata::generate_phantom(&mut RngStream::new(s, 0), &spec)
                    .unwrap()
                    .0
            })
            .collect();
        assert!(region_dice_table(&imgs, &imgs, &spec)
            .unwrap()
            .iter()
            .all(|&d| d == 1.0));
        let bg: Vec<Tensor> = imgs
            .iter()
            .map(|i| Tensor::full(i.shape(), spec.background_level))
            .collect();
        assert!(region_dice_table(&imgs, &bg, &spec).unwrap().iter().all(|&d| d == 0.0));
        let half_band = 0.05;
        let mut prev = 1.0;
        for step in 1..=4 {
            let shifted: Vec<Tensor> = imgs
                .iter()
                .map(|i| i.map(|v| (v + half_band * step as f64).min(1.0)))
                .collect();
            let table = region_dice_table(&imgs, &shifted, &spec).unwrap();
            let mean = table.iter().sum::<f64>() / table.len() as f64;
            assert!(mean <= prev, "shift {step}: {mean} > {prev}");
            prev = mean;
        }
        assert!(prev < 0.9);
    }

    #[test]
    fn ranks() {
        let t = |rows: &[(&str, &[f64])]| -> Vec<(String, Vec<f64>)> {
            rows.iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect()
        };
        let r = average_rank(&t(&[("a", &[0.9, 0.1]), ("b", &[0.5, 0.3])]), &[true, false]).unwrap();
        assert_eq!(r[0].1, 1.0);
        assert_eq!(r[1].1, 2.0);
        let r = average_rank(&t(&[("a", &[0.5, 0.5]), ("b", &[0.5, 0.5])]), &[true, true]).unwrap();
        assert_eq!((r[0].1, r[1].1), (1.5, 1.5));
        // 3 methods × 4 regions, hand-ranked:
        // r1: a>b>c (1,2,3); r2: b>a>c (2,1,3); r3: c>a=b (2.5,2.5,1); r4: a>c>b (1,3,2).
        let table = t(&[
            ("a", &[0.9, 0.7, 0.2, 0.8]),
            ("b", &[0.8, 0.9, 0.2, 0.1]),
            ("c", &[0.1, 0.3, 0.6, 0.5]),
        ]);
        let r = average_rank(&table, &[true; 4]).unwrap();
        assert_eq!(r[0].1, (1.0 + 2.0 + 2.5 + 1.0) / 4.0);
        assert_eq!(r[1].1, (2.0 + 1.0 + 2.5 + 3.0) / 4.0);
        assert_eq!(r[2].1, (3.0 + 3.0 + 1.0 + 2.0) / 4.0);
        assert!(average_rank(&t(&[("a", &[0.1])]), &[true]).is_err());
        assert!(average_rank(&t(&[("a", &[0.1]), ("b", &[])]), &[true]).is_err());
    }
}
