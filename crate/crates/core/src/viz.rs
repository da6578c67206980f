//! Bilinear upsampling, heatmap overlays and binary PPM/PGM output.

use std::path::Path;

use crate::error::{domain, parse_err, Error, Result};
use crate::metrics::ThresholdedMap;

/// Bilinear resize with pixel-center alignment (half-pixel offset, edge
/// clamped): output `x` samples the input at `(x + 0.5) * w / W - 0.5`.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if map.len() != h * w || h == 0 || w == 0 {
        return Err(domain(format!("map has {} values, expected {h}x{w}", map.len())));
    }
    if out_h < h || out_w < w {
        return Err(domain(format!("cannot downscale {h}x{w} to {out_h}x{out_w}")));
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis(h, out_h);
    let cols = axis(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStyle {
    /// `(position, [r, g, b])` control points with strictly increasing
    /// positions from 0 to 1.
    pub colormap: Vec<(f64, [f64; 3])>,
    pub overlay_alpha: f64,
}

impl Default for HeatmapStyle {
    /// Blue, cyan, green, yellow, red; half-transparent.
    fn default() -> Self {
        Self {
            colormap: vec![
                (0.0, [0.0, 0.0, 1.0]),
                (0.25, [0.0, 1.0, 1.0]),
                (0.5, [0.0, 1.0, 0.0]),
                (0.75, [1.0, 1.0, 0.0]),
                (1.0, [1.0, 0.0, 0.0]),
            ],
            overlay_alpha: 0.5,
        }
    }
}

impl HeatmapStyle {
    pub fn validate(&self) -> Result<()> {
        let cm = &self.colormap;
        let increasing = cm.windows(2).all(|w| w[0].0 < w[1].0);
        if cm.len() < 2 || !increasing || cm[0].0 != 0.0 || cm[cm.len() - 1].0 != 1.0 {
            return Err(domain("colormap positions must increase strictly from 0 to 1"));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(domain(format!("overlay alpha {} outside [0, 1]", self.overlay_alpha)));
        }
        Ok(())
    }

    /// Piecewise-linear color at `t`, clamped to `[0, 1]`.
    pub fn color(&self, t: f64) -> [f64; 3] {
        let t = t.clamp(0.0, 1.0);
        let cm = &self.colormap;
        let i = cm.windows(2).position(|w| t <= w[1].0).unwrap_or(cm.len() - 2);
        let ((p0, c0), (p1, c1)) = (cm[i], cm[i + 1]);
        let f = (t - p0) / (p1 - p0);
        [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * f)
    }
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

/// Blends the colormapped heat (value normalized by the map maximum) over the
/// grayscale image wherever the thresholded map is nonzero.
pub fn render_overlay(image: &[f64], tmap: &ThresholdedMap, style: &HeatmapStyle) -> Result<RgbImage> {
    style.validate()?;
    if image.len() != tmap.values.len() || image.len() != tmap.height * tmap.width {
        return Err(domain(format!(
            "image has {} pixels, heatmap is {}x{}",
            image.len(),
            tmap.height,
            tmap.width
        )));
    }
    let max = tmap.values.iter().copied().fold(0.0, f64::max);
    let a = style.overlay_alpha;
    let pixels = image
        .iter()
        .zip(&tmap.values)
        .map(|(&g, &v)| {
            if v > 0.0 {
                let c = style.color(v / max);
                c.map(|ck| a * ck + (1.0 - a) * g)
            } else {
                [g, g, g]
            }
        })
        .collect();
    Ok(RgbImage {
        width: tmap.width,
        height: tmap.height,
        pixels,
    })
}

/// Places images side by side; all must share a height.
pub fn hconcat(images: &[RgbImage]) -> Result<RgbImage> {
    let Some(first) = images.first() else {
        return Err(domain("nothing to concatenate"));
    };
    if images.iter().any(|im| im.height != first.height) {
        return Err(domain("images differ in height"));
    }
    let width = images.iter().map(|im| im.width).sum();
    let mut pixels = Vec::with_capacity(width * first.height);
    for y in 0..first.height {
        for im in images {
            pixels.extend_from_slice(&im.pixels[y * im.width..(y + 1) * im.width]);
        }
    }
    Ok(RgbImage {
        width,
        height: first.height,
        pixels,
    })
}

/// Half-up quantization to a byte.
pub fn to_byte(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(domain(format!("pixel value {v} outside [0, 1]")));
    }
    Ok((v * 255.0 + 0.5).floor() as u8)
}

/// Binary P6 with header `P6 <w> <h> 255`.
pub fn encode_ppm(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = format!("P6 {} {} 255\n", image.width, image.height).into_bytes();
    for px in &image.pixels {
        for &c in px {
            out.push(to_byte(c)?);
        }
    }
    Ok(out)
}

/// Binary P5 with header `P5 <w> <h> 255`.
pub fn encode_pgm(pixels: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(domain("pixel count does not match dimensions"));
    }
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    for &v in pixels {
        out.push(to_byte(v)?);
    }
    Ok(out)
}

/// A decoded binary netpbm image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Reads binary P5/P6 with maxval 255 (comments are not supported).
pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(pos, "truncated netpbm header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].1 {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(parse_err(0, "expected P5 or P6 magic")),
    };
    let num = |i: usize| -> Result<usize> {
        let (off, s) = fields[i];
        s.parse().map_err(|_| parse_err(off, format!("invalid header field {s:?}")))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(parse_err(fields[3].0, "only maxval 255 is supported"));
    }
    let need = width * height * channels;
    let data = bytes.get(pos..pos + need).ok_or_else(|| parse_err(bytes.len(), "truncated raster"))?;
    Ok(Pnm {
        width,
        height,
        channels,
        data: data.to_vec(),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    write_bytes(path, &encode_ppm(image)?)
}

pub fn write_pgm(pixels: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    write_bytes(path, &encode_pgm(pixels, width, height)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn upsample_constant_and_ramp() {
        let up = upsample_bilinear(&[0.7; 4], 2, 2, 5, 7).unwrap();
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        // Sample positions -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1.
        let up = upsample_bilinear(&[0.0, 1.0, 0.0, 1.0], 2, 2, 2, 4).unwrap();
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);

        assert!(upsample_bilinear(&[0.0; 4], 2, 2, 1, 4).is_err());
    }

    #[test]
    fn upsample_preserves_corners() {
        let map = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let up = upsample_bilinear(&map, 2, 3, 8, 12).unwrap();
        assert_eq!(up[0], 1.0);
        assert_eq!(up[11], 3.0);
        assert_eq!(up[7 * 12], 4.0);
        assert_eq!(up[8 * 12 - 1], 6.0);
    }

    fn tmap(values: Vec<f64>, h: usize, w: usize) -> ThresholdedMap {
        ThresholdedMap {
            values,
            height: h,
            width: w,
            threshold: 0.0,
            retained_fraction: 1.0,
            degenerate: false,
        }
    }

    #[test]
    fn overlay_examples() {
        let image = [0.1, 0.4, 0.9, 0.0];
        let out = render_overlay(&image, &tmap(vec![0.0; 4], 2, 2), &HeatmapStyle::default()).unwrap();
        assert_eq!(out.pixels, image.map(|g| [g, g, g]).to_vec());

        let opaque = HeatmapStyle { overlay_alpha: 1.0, ..HeatmapStyle::default() };
        let out = render_overlay(&image, &tmap(vec![0.0, 2.0, 0.0, 0.0], 2, 2), &opaque).unwrap();
        assert_eq!(out.pixels[1], [1.0, 0.0, 0.0]);

        let red = HeatmapStyle { colormap: vec![(0.0, [1.0, 0.0, 0.0]), (1.0, [1.0, 0.0, 0.0])], overlay_alpha: 0.5 };
        let out = render_overlay(&[0.4], &tmap(vec![1.0], 1, 1), &red).unwrap();
        for (got, want) in out.pixels[0].iter().zip([0.7, 0.2, 0.2]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(render_overlay(&[0.4, 0.1], &tmap(vec![1.0], 1, 1), &red).is_err());
    }

    #[test]
    fn colormap_ramp() {
        let s = HeatmapStyle::default();
        assert_eq!(s.color(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(s.color(0.5), [0.0, 1.0, 0.0]);
        assert_eq!(s.color(0.875), [1.0, 0.5, 0.0]);
        let bad = HeatmapStyle { colormap: vec![(0.0, [0.0; 3]), (0.0, [1.0; 3]), (1.0, [1.0; 3])], overlay_alpha: 0.5 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ppm_bytes() {
        let white = RgbImage { width: 1, height: 1, pixels: vec![[1.0; 3]] };
        assert_eq!(encode_ppm(&white).unwrap(), b"P6 1 1 255\n\xff\xff\xff".to_vec());
        assert_eq!(to_byte(0.5).unwrap(), 128);
        assert!(to_byte(1.5).is_err());
        assert!(to_byte(f64::NAN).is_err());
    }

    #[test]
    fn pnm_decode_errors() {
        assert!(decode_pnm(b"P6 2 2 255\n\x00").is_err());
        assert!(decode_pnm(b"P3 1 1 255\n\x00\x00\x00").is_err());
        assert!(decode_pnm(b"").is_err());
    }

    proptest! {
        #[test]
        fn pnm_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let vals: Vec<f64> = (0..w * h * 3).map(|i| ((seed >> (i % 60)) % 256) as f64 / 255.0).collect();
            let img = RgbImage { width: w, height: h, pixels: vals.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
            let decoded = decode_pnm(&encode_ppm(&img).unwrap()).unwrap();
            prop_assert_eq!((decoded.width, decoded.height, decoded.channels), (w, h, 3));
            let expected: Vec<u8> = vals.iter().map(|&v| to_byte(v).unwrap()).collect();
            prop_assert_eq!(decoded.data, expected);

            let gray = decode_pnm(&encode_pgm(&vals[..w * h], w, h).unwrap()).unwrap();
            prop_assert_eq!(gray.channels, 1);
        }

        #[test]
        fn upsampling_commutes_with_affine_maps(vals in proptest::collection::vec(-4.0f64..4.0, 6), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let up = upsample_bilinear(&vals, 2, 3, 5, 9).unwrap();
            let moved: Vec<f64> = vals.iter().map(|v| v * scale + shift).collect();
            let up_moved = upsample_bilinear(&moved, 2, 3, 5, 9).unwrap();
            for (a, b) in up.iter().zip(&up_moved) {
                prop_assert!((a * scale + shift - b).abs() < 1e-9);
            }
        }
    }
}
