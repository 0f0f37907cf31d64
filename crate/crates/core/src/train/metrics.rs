use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Exact, via tie groups of the sorted scores.
pub fn pixel_auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U, to keep ties integral
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// 8-connected component labels of `mask` (row-major `h × w`); 0 marks background.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut label = vec![0usize; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        count += 1;
        label[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = ((p / w) as isize, (p % w) as isize);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (a, b) = (i + di, j + dj);
                    if a < 0 || b < 0 || a >= h as isize || b >= w as isize {
                        continue;
                    }
                    let q = a as usize * w + b as usize;
                    if mask[q] && label[q] == 0 {
                        label[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (label, count)
}

/// Points `(fpr, pro)` of the per-region-overlap curve over every distinct
/// threshold, descending, starting at `(0, 0)`.
pub fn pro_curve(scores: &[f64], mask: &[bool], h: usize, w: usize) -> Result<Vec<(f64, f64)>> {
    if scores.len() != h * w || mask.len() != h * w {
        return Err(Error::Shape(format!("score map and mask must both hold {h}x{w} values")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    let (label, regions) = connected_components(mask, h, w);
    if regions == 0 {
        return Err(Error::UndefinedMetric("mask has no anomalous region".into()));
    }
    let negatives = mask.iter().filter(|&&m| !m).count();
    if negatives == 0 {
        return Err(Error::UndefinedMetric("mask has no normal pixels".into()));
    }
    let mut area = vec![0usize; regions + 1];
    for &l in &label {
        area[l] += 1;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut overlap_sum = 0.0;
    let mut fp = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            let l = label[order[i]];
            if l == 0 {
                fp += 1;
            } else {
                overlap_sum += 1.0 / area[l] as f64;
            }
            i += 1;
        }
        curve.push((fp as f64 / negatives as f64, overlap_sum / regions as f64));
    }
    Ok(curve)
}

/// Area under a piecewise-linear curve from `x = 0` to `limit`.
pub fn trapezoid_to(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for seg in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

/// Normalized area under the PRO curve up to `fpr_limit`.
pub fn aupro(scores: &[f64], mask: &[bool], h: usize, w: usize, fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!("FPR limit {fpr_limit} outside (0, 1]")));
    }
    let curve = pro_curve(scores, mask, h, w)?;
    Ok(trapezoid_to(&curve, fpr_limit) / fpr_limit)
}
