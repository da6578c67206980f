//! Explainability metrics: top-10% thresholding, part explainability (IoU of a
//! channel's hottest region with the best-matching part), location consistency
//! of channel-to-part assignments, and activation robustness (prominent peak
//! counts).

use std::fmt::Write as _;

use crate::error::{domain, Result};

/// A map with every pixel below `threshold` zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdedMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub threshold: f64,
    pub retained_fraction: f64,
    /// The input was constant, so every pixel was retained.
    pub degenerate: bool,
}

impl ThresholdedMap {
    /// Binarized activation region: pixels with value `> 0`.
    pub fn support(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.0).collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v > 0.0)
    }
}

/// Keeps the top `fraction` of pixels: `t` is the largest value such that at
/// least `ceil(fraction * n)` pixels are `>= t`. Pixels tied with `t` are all
/// kept.
pub fn top_fraction_threshold(map: &[f64], height: usize, width: usize, fraction: f64) -> Result<ThresholdedMap> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(domain(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = height * width;
    threshold_top_k(map, height, width, (fraction * n as f64).ceil() as usize)
}

/// Top-10% threshold; `ceil(0.1 n)` is computed in integers.
pub fn top10_threshold(map: &[f64], height: usize, width: usize) -> Result<ThresholdedMap> {
    threshold_top_k(map, height, width, (height * width).div_ceil(10))
}

fn threshold_top_k(map: &[f64], height: usize, width: usize, k: usize) -> Result<ThresholdedMap> {
    let n = height * width;
    if n == 0 || map.len() != n {
        return Err(domain(format!("map has {} values, expected {height}x{width}", map.len())));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(domain("map contains non-finite values"));
    }
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(ThresholdedMap {
            values: map.to_vec(),
            height,
            width,
            threshold: max,
            retained_fraction: 1.0,
            degenerate: true,
        });
    }
    let k = k.clamp(1, n);
    let mut sorted = map.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let t = sorted[k - 1];
    let mut kept = 0;
    let values = map
        .iter()
        .map(|&v| {
            if v >= t {
                kept += 1;
                v
            } else {
                0.0
            }
        })
        .collect();
    Ok(ThresholdedMap {
        values,
        height,
        width,
        threshold: t,
        retained_fraction: kept as f64 / n as f64,
        degenerate: false,
    })
}

/// `|a ∩ b| / |a ∪ b|`, defined as 0 for an empty union.
pub fn iou_sets(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(domain(format!("mask sizes differ: {} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub fn iou(mask: &[bool], activation: &ThresholdedMap) -> Result<f64> {
    iou_sets(mask, &activation.support())
}

/// IoU of one channel's activation with every part mask; `None` when the
/// thresholded activation is empty.
pub fn part_ious(activation: &ThresholdedMap, masks: &[Vec<bool>]) -> Result<Option<Vec<f64>>> {
    if masks.is_empty() {
        return Err(domain("part set is empty"));
    }
    if activation.is_empty() {
        return Ok(None);
    }
    let support = activation.support();
    masks.iter().map(|m| iou_sets(m, &support)).collect::<Result<Vec<_>>>().map(Some)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Mean over channels of the best-part IoU (empty channels count as 0).
pub fn part_explainability_from_scores(scores: &[Option<Vec<f64>>]) -> Result<f64> {
    if scores.is_empty() {
        return Err(domain("no channels to score"));
    }
    let total: f64 = scores
        .iter()
        .map(|s| s.as_ref().map_or(0.0, |ious| ious[argmax(ious)]))
        .sum();
    Ok(total / scores.len() as f64)
}

/// Part explainability of one image from its thresholded channel maps.
pub fn part_explainability(maps: &[ThresholdedMap], masks: &[Vec<bool>]) -> Result<f64> {
    let scores = maps.iter().map(|m| part_ious(m, masks)).collect::<Result<Vec<_>>>()?;
    part_explainability_from_scores(&scores)
}

/// Empirical channel-to-part assignment probabilities. Channels that never
/// produced a non-empty activation are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub n_parts: usize,
    /// Channel index of each retained row.
    pub channels: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

/// `scores[image][channel]` as produced by [`part_ious`].
pub fn assignment(scores: &[Vec<Option<Vec<f64>>>], n_parts: usize) -> Result<AssignmentMatrix> {
    if scores.is_empty() || n_parts == 0 {
        return Err(domain("assignment needs at least one image and one part"));
    }
    let n_channels = scores[0].len();
    let mut counts = vec![vec![0usize; n_parts]; n_channels];
    for image in scores {
        if image.len() != n_channels {
            return Err(domain("images disagree on channel count"));
        }
        for (c, s) in image.iter().enumerate() {
            if let Some(ious) = s {
                if ious.len() != n_parts {
                    return Err(domain("score has wrong number of parts"));
                }
                counts[c][argmax(ious)] += 1;
            }
        }
    }
    let mut channels = Vec::new();
    let mut rows = Vec::new();
    for (c, row) in counts.into_iter().enumerate() {
        let total: usize = row.iter().sum();
        if total > 0 {
            channels.push(c);
            rows.push(row.into_iter().map(|k| k as f64 / total as f64).collect());
        }
    }
    Ok(AssignmentMatrix { n_parts, channels, rows })
}

/// Per-channel spread `S_i = sqrt(sum_k (A_ik - 1/K)^2) / K` and its mean `LS`
/// over retained channels (0 when none remain).
pub fn location_consistency(a: &AssignmentMatrix) -> (Vec<f64>, f64) {
    let k = a.n_parts as f64;
    let s: Vec<f64> = a
        .rows
        .iter()
        .map(|row| row.iter().map(|&p| (p - 1.0 / k).powi(2)).sum::<f64>().sqrt() / k)
        .collect();
    let ls = if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    (s, ls)
}

/// The printed form without the square, `sqrt(sum_k (A_ik - 1/K)) / K`. The
/// radicand is zero for any row-stochastic row up to rounding; a radicand below
/// `-1e-12` is rejected.
pub fn location_consistency_literal(a: &AssignmentMatrix) -> Result<(Vec<f64>, f64)> {
    let k = a.n_parts as f64;
    let mut s = Vec::with_capacity(a.rows.len());
    for (row, &c) in a.rows.iter().zip(&a.channels) {
        let radicand: f64 = row.iter().map(|&p| p - 1.0 / k).sum();
        if radicand < -1e-12 {
            return Err(domain(format!("channel {c}: negative radicand {radicand:e}")));
        }
        s.push(radicand.max(0.0).sqrt() / k);
    }
    let ls = if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    Ok((s, ls))
}

/// Topographic prominence of every peak, by sweeping pixels from high to low
/// and merging 8-connected components with a union-find. Pixels are ranked by
/// value, ties broken by lower index first; when two components meet, the one
/// with the lower-ranked peak dies and its prominence is its peak height minus
/// the current level. The surviving global peak gets `max - min`.
///
/// Returns `(pixel index, prominence)` pairs in rank order of the peaks.
pub fn peak_prominences(map: &[f64], height: usize, width: usize) -> Vec<(usize, f64)> {
    let n = height * width;
    assert_eq!(map.len(), n, "map size");
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let mut parent: Vec<usize> = (0..n).collect();
    // peak pixel of each root; valid only for processed pixels
    let mut peak = vec![usize::MAX; n];
    let mut processed = vec![false; n];
    let mut prominence = vec![None; n];

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    for &p in &order {
        processed[p] = true;
        peak[p] = p;
        let level = map[p];
        let (y, x) = ((p / width) as isize, (p % width) as isize);
        let mut roots: Vec<usize> = Vec::with_capacity(8);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let q = ny as usize * width + nx as usize;
                if processed[q] && q != p {
                    let r = find(&mut parent, q);
                    if !roots.contains(&r) {
                        roots.push(r);
                    }
                }
            }
        }
        if roots.is_empty() {
            continue;
        }
        // p joins the neighbouring component with the highest peak; all other
        // neighbouring components die at this level.
        let best = *roots.iter().min_by_key(|&&r| rank[peak[r]]).unwrap();
        for &r in &roots {
            if r != best {
                prominence[peak[r]] = Some(map[peak[r]] - level);
                parent[r] = best;
            }
        }
        parent[p] = best;
    }

    let min = map[order[n - 1]];
    let top = order[0];
    prominence[top] = Some(map[top] - min);
    let mut peaks: Vec<(usize, f64)> = prominence
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|v| (i, v)))
        .collect();
    peaks.sort_by_key(|&(i, _)| rank[i]);
    peaks
}

/// `0.05 * (max - min)`.
pub fn default_prominence_min(map: &[f64]) -> f64 {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if map.is_empty() { 0.0 } else { 0.05 * (max - min) }
}

/// Number of peaks whose prominence strictly exceeds `prominence_min`.
pub fn count_peaks(map: &[f64], height: usize, width: usize, prominence_min: f64) -> usize {
    peak_prominences(map, height, width)
        .into_iter()
        .filter(|&(_, p)| p > prominence_min)
        .count()
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_stderr(counts: &[usize]) -> Result<(f64, f64)> {
    if counts.len() < 2 {
        return Err(domain("standard error needs at least two maps"));
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt() / n.sqrt()))
}

/// Peak count statistics over a collection of `height x width` maps. A `None`
/// threshold uses [`default_prominence_min`] per map.
pub fn activation_robustness(
    maps: &[&[f64]],
    height: usize,
    width: usize,
    prominence_min: Option<f64>,
) -> Result<(f64, f64)> {
    let counts: Vec<usize> = maps
        .iter()
        .map(|m| {
            let thr = prominence_min.unwrap_or_else(|| default_prominence_min(m));
            count_peaks(m, height, width, thr)
        })
        .collect();
    mean_stderr(&counts)
}

/// Metrics for one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub pe_per_image: Vec<f64>,
    pub pe_mean: f64,
    pub ls: f64,
    /// `(channel, S_i)` for channels with at least one non-empty activation.
    pub s_per_channel: Vec<(usize, f64)>,
    pub peak_mean: f64,
    pub peak_stderr: f64,
    /// Upsampled maps that were constant.
    pub degenerate_maps: usize,
    pub maps: usize,
    pub accuracy: f64,
}

impl MetricsReport {
    /// Rows of `metric,scope,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,scope,value\n");
        for (i, pe) in self.pe_per_image.iter().enumerate() {
            writeln!(out, "pe,image:{i},{pe:.9}").unwrap();
        }
        for (c, s) in &self.s_per_channel {
            writeln!(out, "s,channel:{c},{s:.9}").unwrap();
        }
        for (name, v) in self.summary_rows() {
            writeln!(out, "{name},all,{v:.9}").unwrap();
        }
        out
    }

    fn summary_rows(&self) -> [(&'static str, f64); 7] {
        [
            ("pe_mean", self.pe_mean),
            ("ls", self.ls),
            ("peak_mean", self.peak_mean),
            ("peak_stderr", self.peak_stderr),
            ("degenerate_maps", self.degenerate_maps as f64),
            ("maps", self.maps as f64),
            ("accuracy", self.accuracy),
        ]
    }

    /// `metric,scope,value` rows comparing `self` (treatment) with `baseline`.
    pub fn comparison_csv(&self, baseline: &MetricsReport) -> String {
        let mut out = String::from("metric,scope,value\n");
        for ((name, a), (_, b)) in self.summary_rows().into_iter().zip(baseline.summary_rows()) {
            writeln!(out, "{name},ecloss,{a:.9}").unwrap();
            writeln!(out, "{name},baseline,{b:.9}").unwrap();
            writeln!(out, "{name},delta,{:.9}", a - b).unwrap();
        }
        out
    }

    /// Plain-text summary: part explainability, location consistency and
    /// activation robustness.
    pub fn summary_table(&self, label: &str) -> String {
        let mut out = String::new();
        writeln!(out, "{:<12} {:>10} {:>10} {:>18} {:>9}", "model", "PE", "LS", "peaks (mean±se)", "acc").unwrap();
        writeln!(
            out,
            "{:<12} {:>10.4} {:>10.4} {:>11.3} ± {:<5.3} {:>8.2}%",
            label,
            self.pe_mean,
            self.ls,
            self.peak_mean,
            self.peak_stderr,
            100.0 * self.accuracy
        )
        .unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_distinct_values() {
        let map: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = top10_threshold(&map, 10, 10).unwrap();
        assert_eq!(t.threshold, 91.0);
        assert_eq!(t.values.iter().filter(|&&v| v > 0.0).count(), 10);
        assert_eq!(t.retained_fraction, 0.1);
        assert!(!t.degenerate);
    }

    #[test]
    fn threshold_constant_and_ties() {
        let t = top10_threshold(&[0.3; 16], 4, 4).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.retained_fraction, 1.0);

        let mut map = vec![0.0; 100];
        for (i, v) in map.iter_mut().enumerate().skip(20) {
            *v = i as f64 / 100.0;
        }
        for v in map.iter_mut().take(15) {
            *v = 5.0;
        }
        let t = top10_threshold(&map, 10, 10).unwrap();
        assert_eq!(t.threshold, 5.0);
        assert_eq!(t.retained_fraction, 0.15);
    }

    #[test]
    fn iou_examples() {
        let a: Vec<bool> = (0..100).map(|i| i < 20).collect();
        assert_eq!(iou_sets(&a, &a).unwrap(), 1.0);
        let b: Vec<bool> = (0..100).map(|i| (50..70).contains(&i)).collect();
        assert_eq!(iou_sets(&a, &b).unwrap(), 0.0);
        let c: Vec<bool> = (0..100).map(|i| (10..30).contains(&i)).collect();
        assert!((iou_sets(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_sets(&[false; 4], &[false; 4]).unwrap(), 0.0);
        assert!(iou_sets(&[true; 3], &[true; 4]).is_err());
    }

    fn tmap(support: &[bool]) -> ThresholdedMap {
        ThresholdedMap {
            values: support.iter().map(|&b| f64::from(u8::from(b))).collect(),
            height: 1,
            width: support.len(),
            threshold: 1.0,
            retained_fraction: 0.1,
            degenerate: false,
        }
    }

    #[test]
    fn part_explainability_examples() {
        let m0 = vec![true, true, false, false, false, false];
        let m1 = vec![false, false, false, false, true, true];
        let masks = vec![m0.clone(), m1.clone()];
        assert_eq!(part_explainability(&[tmap(&m0), tmap(&m1)], &masks).unwrap(), 1.0);
        let off = vec![false, false, true, true, false, false];
        assert_eq!(part_explainability(&[tmap(&off)], &masks).unwrap(), 0.0);
        let scores = vec![Some(vec![0.4, 0.1]), Some(vec![0.0, 0.2])];
        assert!((part_explainability_from_scores(&scores).unwrap() - 0.3).abs() < 1e-15);
        assert!(part_explainability(&[tmap(&off)], &[]).is_err());
    }

    #[test]
    fn assignment_examples() {
        let img = |a: usize| vec![Some((0..4).map(|k| if k == a { 0.5 } else { 0.1 }).collect::<Vec<f64>>())];
        let always2: Vec<_> = (0..10).map(|_| img(2)).collect();
        let a = assignment(&always2, 4).unwrap();
        assert_eq!(a.rows, vec![vec![0.0, 0.0, 1.0, 0.0]]);

        let alternating: Vec<_> = (0..10).map(|i| img(i % 2)).collect();
        let a = assignment(&alternating, 4).unwrap();
        assert_eq!(a.rows, vec![vec![0.5, 0.5, 0.0, 0.0]]);

        // ties go to the lowest part, empty maps are skipped
        let tied = vec![vec![Some(vec![0.3, 0.3, 0.0]), None], vec![Some(vec![0.0, 0.1, 0.1]), None]];
        let a = assignment(&tied, 3).unwrap();
        assert_eq!(a.channels, vec![0]);
        assert_eq!(a.rows, vec![vec![0.5, 0.5, 0.0]]);
        for row in &a.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn location_consistency_examples() {
        let a = AssignmentMatrix {
            n_parts: 4,
            channels: vec![0, 1],
            rows: vec![vec![0.25; 4], vec![1.0, 0.0, 0.0, 0.0]],
        };
        let (s, ls) = location_consistency(&a);
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 0.75f64.sqrt() / 4.0).abs() < 1e-15);
        assert!((s[1] - 0.2165).abs() < 1e-4);
        assert!((ls - 0.10825).abs() < 1e-4);

        let (lit, lit_ls) = location_consistency_literal(&a).unwrap();
        assert_eq!(lit, vec![0.0, 0.0]);
        assert_eq!(lit_ls, 0.0);
        let bad = AssignmentMatrix { n_parts: 2, channels: vec![0], rows: vec![vec![0.2, 0.2]] };
        assert!(location_consistency_literal(&bad).is_err());
    }

    fn blob(h: usize, w: usize, centers: &[(f64, f64, f64)], sigma: f64) -> Vec<f64> {
        let mut m = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                for &(cy, cx, amp) in centers {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    // clip to an exact zero background
                    if v > 1e-3 {
                        m[y * w + x] += v;
                    }
                }
            }
        }
        m
    }

    #[test]
    fn peak_examples() {
        let one = blob(16, 16, &[(8.0, 8.0, 1.0)], 1.5);
        assert_eq!(count_peaks(&one, 16, 16, 0.1), 1);
        let two = blob(16, 16, &[(4.0, 4.0, 1.0), (11.0, 11.0, 1.0)], 1.2);
        assert_eq!(count_peaks(&two, 16, 16, 0.1), 2);
        assert_eq!(count_peaks(&[0.0; 64], 8, 8, 0.0), 0);
        assert_eq!(count_peaks(&[0.0; 64], 8, 8, default_prominence_min(&[0.0; 64])), 0);
    }

    #[test]
    fn saddle_sets_prominence() {
        // 1-D ridge: 3 . 1 . 2 -> the lower peak's prominence is 2 - 1
        let map = [3.0, 1.0, 2.0, 0.0];
        let p = peak_prominences(&map, 1, 4);
        assert_eq!(p, vec![(0, 3.0), (2, 1.0)]);
    }

    #[test]
    fn robustness_statistics() {
        let (m, se) = mean_stderr(&[1, 1, 1]).unwrap();
        assert_eq!((m, se), (1.0, 0.0));
        let (m, se) = mean_stderr(&[1, 2, 3]).unwrap();
        assert_eq!(m, 2.0);
        assert!((se - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!(mean_stderr(&[1]).is_err());

        let b = blob(8, 8, &[(4.0, 4.0, 1.0)], 1.0);
        let maps: Vec<&[f64]> = vec![&b, &b];
        assert_eq!(activation_robustness(&maps, 8, 8, None).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn report_csv_layout() {
        let r = MetricsReport {
            pe_per_image: vec![0.5],
            pe_mean: 0.5,
            ls: 0.1,
            s_per_channel: vec![(3, 0.2)],
            peak_mean: 1.5,
            peak_stderr: 0.1,
            degenerate_maps: 0,
            maps: 4,
            accuracy: 0.9,
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,scope,value\npe,image:0,0.500000000\ns,channel:3,0.200000000\n"));
        assert!(csv.contains("ls,all,0.100000000\n"));
        let cmp = r.comparison_csv(&r);
        assert!(cmp.contains("peak_mean,delta,0.000000000\n"));
        assert!(r.summary_table("ecloss").contains("PE"));
    }
}
