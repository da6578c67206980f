//! Synthetic part-based "faces": blobs at jittered canonical positions with
//! identity-specific intensity and size, plus exact per-part masks.
//!
//! Normalized coordinates are `(u, v)` = (column, row) in `[0, 1]`, with pixel
//! `(y, x)` centered at `((x + 0.5) / W, (y + 0.5) / H)`.

use std::fmt::Write as _;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{domain, parse_err, Result};
use crate::nn::LabeledImages;
use crate::rng;
use crate::textio::{parse_token, LineCursor};

/// Per-identity radius scale range; disjointness is validated against the upper end.
const RADIUS_SCALE: (f64, f64) = (0.85, 1.15);
const INTENSITY: (f64, f64) = (0.35, 1.0);
const BACKGROUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Gaussian,
    Disk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSpec {
    pub name: String,
    /// `(u, v)` in `[0, 1]^2`.
    pub center: (f64, f64),
    /// Normalized half-maximum radius.
    pub radius: f64,
    pub profile: Profile,
}

impl PartSpec {
    pub fn new(name: &str, center: (f64, f64), radius: f64, profile: Profile) -> Self {
        Self {
            name: name.to_string(),
            center,
            radius,
            profile,
        }
    }

    /// Two eyes, nose and mouth.
    pub fn face_parts() -> Vec<PartSpec> {
        vec![
            PartSpec::new("left_eye", (0.3, 0.3), 0.08, Profile::Gaussian),
            PartSpec::new("right_eye", (0.7, 0.3), 0.08, Profile::Gaussian),
            PartSpec::new("nose", (0.5, 0.55), 0.07, Profile::Disk),
            PartSpec::new("mouth", (0.5, 0.83), 0.08, Profile::Gaussian),
        ]
    }

    fn value(&self, dist: f64, radius: f64) -> f64 {
        match self.profile {
            Profile::Disk => f64::from(u8::from(dist <= radius)),
            Profile::Gaussian => {
                // half maximum at dist == radius
                let sigma2 = radius * radius / (2.0 * std::f64::consts::LN_2);
                (-dist * dist / (2.0 * sigma2)).exp()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    /// Images are `image_size x image_size`.
    pub image_size: usize,
    /// Maximum normalized displacement of each part center.
    pub jitter_radius: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_identities: 10,
            samples_per_identity: 200,
            image_size: 56,
            jitter_radius: 0.05,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self, parts: &[PartSpec]) -> Result<()> {
        if self.n_identities == 0 || self.samples_per_identity == 0 || self.image_size == 0 {
            return Err(domain("identities, samples per identity and image size must be positive"));
        }
        if !(self.jitter_radius >= 0.0 && self.jitter_radius.is_finite()) {
            return Err(domain(format!("invalid jitter radius {}", self.jitter_radius)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(domain(format!("invalid noise std {}", self.noise_std)));
        }
        if parts.is_empty() {
            return Err(domain("at least one part is required"));
        }
        for p in parts {
            let (u, v) = p.center;
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) || p.radius.is_nan() || p.radius <= 0.0 {
                return Err(domain(format!("part {} lies outside the unit square", p.name)));
            }
        }
        for (a, pa) in parts.iter().enumerate() {
            for pb in &parts[a + 1..] {
                let d = (pa.center.0 - pb.center.0).hypot(pa.center.1 - pb.center.1);
                let reach = (pa.radius + pb.radius) * RADIUS_SCALE.1;
                if d - 2.0 * self.jitter_radius <= reach {
                    return Err(domain(format!(
                        "parts {} and {} can overlap: center distance {d:.3}, jitter {}, radii {} + {}",
                        pa.name, pb.name, self.jitter_radius, pa.radius, pb.radius
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// Row-major `H x W` pixels in `[0, 1]`.
    pub image: Vec<f64>,
    pub identity: usize,
    /// One row-major `H x W` mask per part.
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub part_names: Vec<String>,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.samples.iter().map(|s| s.identity + 1).max().unwrap_or(0)
    }

    /// Single-channel training view of the selected samples.
    pub fn labeled(&self, indices: &[usize]) -> LabeledImages {
        let mut pixels = Vec::with_capacity(indices.len() * self.height * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(&self.samples[i].image);
            labels.push(self.samples[i].identity);
        }
        LabeledImages {
            channels: 1,
            height: self.height,
            width: self.width,
            pixels,
            labels,
        }
    }
}

/// Pixels within `radius` (normalized) of `center` on a `size x size` grid.
pub fn part_mask(center: (f64, f64), radius: f64, size: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            mask.push((u - center.0).hypot(v - center.1) <= radius);
        }
    }
    mask
}

struct Signature {
    intensity: Vec<f64>,
    radius_scale: Vec<f64>,
}

fn signatures(spec: &DatasetSpec, n_parts: usize) -> Vec<Signature> {
    (0..spec.n_identities)
        .map(|id| {
            let mut rng = rng::indexed_stream(spec.seed, "identity", id as u64);
            let intensity = (0..n_parts).map(|_| rng.random_range(INTENSITY.0..=INTENSITY.1)).collect();
            let radius_scale = (0..n_parts)
                .map(|_| rng.random_range(RADIUS_SCALE.0..=RADIUS_SCALE.1))
                .collect();
            Signature { intensity, radius_scale }
        })
        .collect()
}

fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn render(spec: &DatasetSpec, parts: &[PartSpec], sig: &Signature, index: usize, identity: usize) -> Result<SynthSample> {
    let size = spec.image_size;
    let mut rng = rng::indexed_stream(spec.seed, "sample", index as u64);
    let centers: Vec<(f64, f64)> = parts
        .iter()
        .map(|p| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let r = spec.jitter_radius * rng.random_range(0.0f64..1.0).sqrt();
            (p.center.0 + r * angle.cos(), p.center.1 + r * angle.sin())
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| domain(e.to_string()))?;
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let mut val = BACKGROUND;
            for (k, p) in parts.iter().enumerate() {
                let d = (u - centers[k].0).hypot(v - centers[k].1);
                val += sig.intensity[k] * p.value(d, p.radius * sig.radius_scale[k]);
            }
            if spec.noise_std > 0.0 {
                val += noise.sample(&mut rng);
            }
            image.push(quantize(val.clamp(0.0, 1.0)));
        }
    }
    let masks = parts
        .iter()
        .enumerate()
        .map(|(k, p)| part_mask(centers[k], p.radius * sig.radius_scale[k], size))
        .collect::<Vec<_>>();
    if let Some(k) = masks.iter().position(|m| !m.contains(&true)) {
        return Err(domain(format!("part {} covers no pixel at {size}x{size}", parts[k].name)));
    }
    Ok(SynthSample { image, identity, masks })
}

/// Generates `n_identities * samples_per_identity` samples, identity-major.
/// Each sample draws from its own stream, so the result does not depend on
/// thread scheduling.
pub fn generate(spec: &DatasetSpec, parts: &[PartSpec]) -> Result<Dataset> {
    spec.validate(parts)?;
    let sigs = signatures(spec, parts.len());
    let n = spec.n_identities * spec.samples_per_identity;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = i / spec.samples_per_identity;
            render(spec, parts, &sigs[id], i, id)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        height: spec.image_size,
        width: spec.image_size,
        part_names: parts.iter().map(|p| p.name.clone()).collect(),
        samples,
    })
}

/// Seeded, identity-stratified split into sorted `(train, eval)` index lists.
/// Identities with at least two samples land on both sides.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(domain(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut by_identity = vec![Vec::new(); dataset.n_classes()];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_identity[s.identity].push(i);
    }
    let mut rng = rng::stream(seed, "split");
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for mut members in by_identity {
        let n = members.len();
        if n == 0 {
            continue;
        }
        members.shuffle(&mut rng);
        let mut k = (n as f64 * train_fraction).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        train.extend_from_slice(&members[..k]);
        eval.extend_from_slice(&members[k..]);
    }
    if train.is_empty() || eval.is_empty() {
        return Err(domain(format!(
            "train fraction {train_fraction} leaves one side of the split empty"
        )));
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

/// `ECDS1 <n> <H> <W> <n_parts>` header; per sample a label line, `H` rows of
/// pixel decimals and `n_parts * H` rows of `0`/`1` mask digits.
pub fn write_dataset(dataset: &Dataset) -> Vec<u8> {
    let (h, w) = (dataset.height, dataset.width);
    let n_parts = dataset.part_names.len();
    let mut out = String::with_capacity(dataset.len() * h * w * 10);
    writeln!(out, "ECDS1 {} {h} {w} {n_parts}", dataset.len()).unwrap();
    for s in &dataset.samples {
        writeln!(out, "{}", s.identity).unwrap();
        for row in s.image.chunks(w) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        for mask in &s.masks {
            for row in mask.chunks(w) {
                out.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
                out.push('\n');
            }
        }
    }
    out.into_bytes()
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| parse_err(e.valid_up_to(), "dataset is not valid UTF-8"))?;
    let mut cursor = LineCursor::new(text);
    let (off, header) = cursor.expect_line("ECDS1 header")?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 5 || f[0] != "ECDS1" {
        return Err(parse_err(off, "malformed header, expected `ECDS1 n H W n_parts`"));
    }
    let n: usize = parse_token(off, header, f[1], "sample count")?;
    let h: usize = parse_token(off, header, f[2], "height")?;
    let w: usize = parse_token(off, header, f[3], "width")?;
    let n_parts: usize = parse_token(off, header, f[4], "part count")?;

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let (off, line) = cursor.expect_line("label")?;
        let identity: usize = parse_token(off, line, line.trim(), "label")?;
        let mut image = Vec::with_capacity(h * w);
        for _ in 0..h {
            let (off, line) = cursor.expect_line("image row")?;
            let before = image.len();
            for tok in line.split_whitespace() {
                image.push(parse_token::<f64>(off, line, tok, "pixel")?);
            }
            if image.len() - before != w {
                return Err(parse_err(off, format!("image row has {} values, expected {w}", image.len() - before)));
            }
        }
        let mut masks = Vec::with_capacity(n_parts);
        for _ in 0..n_parts {
            let mut mask = Vec::with_capacity(h * w);
            for _ in 0..h {
                let (off, line) = cursor.expect_line("mask row")?;
                if line.len() != w {
                    return Err(parse_err(off, format!("mask row has {} cells, expected {w}", line.len())));
                }
                for (col, c) in line.bytes().enumerate() {
                    match c {
                        b'0' => mask.push(false),
                        b'1' => mask.push(true),
                        _ => return Err(parse_err(off + col, "mask cells must be 0 or 1")),
                    }
                }
            }
            masks.push(mask);
        }
        samples.push(SynthSample { image, identity, masks });
    }
    if let Some((off, line)) = cursor.next_line() {
        if !line.trim().is_empty() {
            return Err(parse_err(off, "trailing data after declared samples"));
        }
    }
    Ok(Dataset {
        height: h,
        width: w,
        part_names: (0..n_parts).map(|k| format!("part{k}")).collect(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(samples: usize) -> DatasetSpec {
        DatasetSpec {
            n_identities: 3,
            samples_per_identity: samples,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn no_noise_no_jitter_gives_identical_images() {
        let spec = DatasetSpec {
            n_identities: 1,
            samples_per_identity: 2,
            jitter_radius: 0.0,
            noise_std: 0.0,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec, &PartSpec::face_parts()).unwrap();
        assert_eq!(ds.samples[0], ds.samples[1]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(4), &PartSpec::face_parts()).unwrap();
        let b = generate(&small(4), &PartSpec::face_parts()).unwrap();
        assert_eq!(a, b);
        let c = generate(&DatasetSpec { seed: 1, ..small(4) }, &PartSpec::face_parts()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn disk_mask_area() {
        let area = part_mask((0.5, 0.5), 0.1, 56).iter().filter(|&&b| b).count() as f64;
        let expected = std::f64::consts::PI * 5.6 * 5.6;
        assert!((area - expected).abs() / expected < 0.15, "{area}");
    }

    #[test]
    fn masks_disjoint_and_nonempty() {
        let ds = generate(&small(10), &PartSpec::face_parts()).unwrap();
        for s in &ds.samples {
            for k in 0..s.masks.len() {
                assert!(s.masks[k].contains(&true));
                for j in k + 1..s.masks.len() {
                    assert!(!s.masks[k].iter().zip(&s.masks[j]).any(|(a, b)| *a && *b));
                }
            }
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn overlapping_parts_rejected() {
        let spec = DatasetSpec { jitter_radius: 0.2, ..DatasetSpec::default() };
        assert!(matches!(spec.validate(&PartSpec::face_parts()), Err(crate::Error::Domain(_))));
        assert!(generate(&spec, &PartSpec::face_parts()).is_err());
    }

    #[test]
    fn identities_separable_by_part_intensity() {
        // nearest centroid on mean intensity inside each part mask
        let spec = DatasetSpec { samples_per_identity: 20, ..DatasetSpec::default() };
        let ds = generate(&spec, &PartSpec::face_parts()).unwrap();
        let feats: Vec<Vec<f64>> = ds
            .samples
            .iter()
            .map(|s| {
                s.masks
                    .iter()
                    .map(|m| {
                        let (sum, n) = s.image.iter().zip(m).filter(|(_, &b)| b).fold((0.0, 0), |(a, n), (v, _)| (a + v, n + 1));
                        sum / n as f64
                    })
                    .collect()
            })
            .collect();
        let k = spec.n_identities;
        let mut centroids = vec![vec![0.0; 4]; k];
        for (f, s) in feats.iter().zip(&ds.samples) {
            for (c, v) in centroids[s.identity].iter_mut().zip(f) {
                *c += v / spec.samples_per_identity as f64;
            }
        }
        let correct = feats
            .iter()
            .zip(&ds.samples)
            .filter(|(f, s)| {
                let dist = |c: &Vec<f64>| c.iter().zip(f.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == s.identity
            })
            .count();
        let acc = correct as f64 / feats.len() as f64;
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn split_examples() {
        let ds = generate(&DatasetSpec { n_identities: 10, samples_per_identity: 10, ..DatasetSpec::default() }, &PartSpec::face_parts()).unwrap();
        let (train, eval) = split(&ds, 0.5, 3).unwrap();
        assert_eq!((train.len(), eval.len()), (50, 50));
        let mut all: Vec<usize> = train.iter().chain(&eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for id in 0..10 {
            assert!(train.iter().any(|&i| ds.samples[i].identity == id));
            assert!(eval.iter().any(|&i| ds.samples[i].identity == id));
        }
        assert_eq!(split(&ds, 0.5, 3).unwrap(), (train, eval));
        assert!(split(&ds, 0.0, 3).is_err());
        assert!(split(&ds, 1.0, 3).is_err());

        let one = generate(&DatasetSpec { n_identities: 1, samples_per_identity: 1, ..DatasetSpec::default() }, &PartSpec::face_parts()).unwrap();
        assert!(split(&one, 0.5, 0).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let ds = generate(&small(2), &PartSpec::face_parts()).unwrap();
        let bytes = write_dataset(&ds);
        assert!(bytes.starts_with(b"ECDS1 6 56 56 4\n"));
        let back = read_dataset(&bytes).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert!(read_dataset(&bytes[..bytes.len() / 2]).is_err());
        assert!(read_dataset(b"ECDS1 1 2 2\n").is_err());
    }
}
