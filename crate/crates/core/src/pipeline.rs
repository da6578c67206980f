//! Evaluation of a trained network on synthetic samples: forward in chunks,
//! then the three explainability metrics and classification accuracy.

use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::metrics::{
    assignment, count_peaks, AssignmentMatrix, default_prominence_min, location_consistency, mean_stderr,
    part_explainability_from_scores, part_ious, top10_threshold, MetricsReport,
};
use crate::nn::{forward, NetworkSpec};
use crate::synthdata::Dataset;
use crate::viz::upsample_bilinear;

const CHUNK: usize = 64;

/// Per-sample target-layer maps (`channels x h x w`, flattened) and predicted classes.
pub struct NetworkOutputs {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub features: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

impl NetworkOutputs {
    pub fn map(&self, sample: usize, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.features[sample][channel * n..(channel + 1) * n]
    }
}

pub fn run_network(spec: &NetworkSpec, params: &[f64], dataset: &Dataset, indices: &[usize]) -> Result<NetworkOutputs> {
    let (channels, height, width) = spec.target_shape()?;
    let mut features = Vec::with_capacity(indices.len());
    let mut predictions = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(CHUNK) {
        let (images, _) = dataset.labeled(chunk).batch(&(0..chunk.len()).collect::<Vec<_>>())?;
        let (logits, feats) = forward(spec, params, &images)?;
        for i in 0..chunk.len() {
            features.push(feats.tensor().outer(i).to_vec());
            let row = logits.outer(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            predictions.push(best);
        }
    }
    Ok(NetworkOutputs { channels, height, width, features, predictions })
}

/// Part explainability, location consistency, peak statistics and accuracy
/// over the selected samples. `prominence_min = None` uses the per-map default.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &[f64],
    dataset: &Dataset,
    indices: &[usize],
    prominence_min: Option<f64>,
) -> Result<MetricsReport> {
    evaluate_with_assignment(spec, params, dataset, indices, prominence_min).map(|(r, _)| r)
}

/// As [`evaluate`], also returning the channel-to-part assignment matrix.
pub fn evaluate_with_assignment(
    spec: &NetworkSpec,
    params: &[f64],
    dataset: &Dataset,
    indices: &[usize],
    prominence_min: Option<f64>,
) -> Result<(MetricsReport, AssignmentMatrix)> {
    if indices.is_empty() {
        return Err(domain("nothing to evaluate"));
    }
    let out = run_network(spec, params, dataset, indices)?;
    let (h, w) = (dataset.height, dataset.width);

    struct PerImage {
        scores: Vec<Option<Vec<f64>>>,
        degenerate: usize,
        peaks: Vec<usize>,
    }
    let per_image: Vec<PerImage> = indices
        .par_iter()
        .enumerate()
        .map(|(n, &idx)| -> Result<PerImage> {
            let masks = &dataset.samples[idx].masks;
            let mut scores = Vec::with_capacity(out.channels);
            let mut degenerate = 0;
            let mut peaks = Vec::with_capacity(out.channels);
            for c in 0..out.channels {
                let map = out.map(n, c);
                let up = upsample_bilinear(map, out.height, out.width, h, w)?;
                let t = top10_threshold(&up, h, w)?;
                degenerate += usize::from(t.degenerate);
                scores.push(part_ious(&t, masks)?);
                let thr = prominence_min.unwrap_or_else(|| default_prominence_min(map));
                peaks.push(count_peaks(map, out.height, out.width, thr));
            }
            Ok(PerImage { scores, degenerate, peaks })
        })
        .collect::<Result<_>>()?;

    let pe_per_image = per_image
        .iter()
        .map(|p| part_explainability_from_scores(&p.scores))
        .collect::<Result<Vec<_>>>()?;
    let pe_mean = pe_per_image.iter().sum::<f64>() / pe_per_image.len() as f64;
    let scores: Vec<Vec<Option<Vec<f64>>>> = per_image.iter().map(|p| p.scores.clone()).collect();
    let a = assignment(&scores, dataset.part_names.len())?;
    let (s, ls) = location_consistency(&a);
    let counts: Vec<usize> = per_image.iter().flat_map(|p| p.peaks.iter().copied()).collect();
    let (peak_mean, peak_stderr) = mean_stderr(&counts)?;
    let correct = indices
        .iter()
        .zip(&out.predictions)
        .filter(|(&i, &p)| dataset.samples[i].identity == p)
        .count();

    let report = MetricsReport {
        pe_per_image,
        pe_mean,
        ls,
        s_per_channel: a.channels.iter().copied().zip(s).collect(),
        peak_mean,
        peak_stderr,
        degenerate_maps: per_image.iter().map(|p| p.degenerate).sum(),
        maps: counts.len(),
        accuracy: correct as f64 / indices.len() as f64,
    };
    Ok((report, a))
}

/// Fraction of the selected samples classified correctly.
pub fn accuracy(spec: &NetworkSpec, params: &[f64], dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(domain("nothing to evaluate"));
    }
    let out = run_network(spec, params, dataset, indices)?;
    let correct = indices
        .iter()
        .zip(&out.predictions)
        .filter(|(&i, &p)| dataset.samples[i].identity == p)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, DatasetSpec, PartSpec};

    #[test]
    fn zero_network_is_degenerate() {
        let ds = generate(
            &DatasetSpec { n_identities: 2, samples_per_identity: 2, ..DatasetSpec::default() },
            &PartSpec::face_parts(),
        )
        .unwrap();
        let spec = NetworkSpec::reference(56, 4, 2);
        let params = vec![0.0; spec.param_count().unwrap()];
        let idx: Vec<usize> = (0..ds.len()).collect();
        let r = evaluate(&spec, &params, &ds, &idx, None).unwrap();
        assert_eq!(r.pe_mean, 0.0);
        assert_eq!(r.degenerate_maps, 16);
        assert_eq!(r.maps, 16);
        assert_eq!(r.peak_mean, 0.0);
        assert!(r.s_per_channel.is_empty());
        assert_eq!(r.ls, 0.0);
    }
}
