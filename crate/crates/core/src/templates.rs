//! Activation templates: the fixed one-peak, two-peak and negative patterns a
//! feature-map channel is scored against.
//!
//! Coordinates are zero-based `(row, col)` pairs on the feature-map grid.

use std::fmt::Write as _;

use crate::error::{domain, parse_err, Error, Result};
use crate::textio::{parse_token, LineCursor};

/// Grid geometry and peak shape shared by every template in a set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateParams {
    pub height: usize,
    pub width: usize,
    /// Peak magnitude.
    pub tau: f64,
    /// Distance at which a one-peak template crosses zero.
    pub radius: f64,
}

impl TemplateParams {
    pub fn new(height: usize, width: usize, tau: f64, radius: f64) -> Result<Self> {
        let params = Self {
            height,
            width,
            tau,
            radius,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(domain(format!(
                "template grid must be non-empty, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(domain(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(domain(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn check_peak(&self, (i, j): (usize, usize)) -> Result<()> {
        if i >= self.height || j >= self.width {
            return Err(domain(format!(
                "peak ({i},{j}) outside {}x{} grid",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// What a template encodes. Two-peak kinds keep their peaks in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateKind {
    Negative,
    OnePeak(usize, usize),
    TwoPeak((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTemplate {
    params: TemplateParams,
    kind: TemplateKind,
    values: Vec<f64>,
}

impl ActivationTemplate {
    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn params(&self) -> &TemplateParams {
        &self.params
    }

    /// Row-major grid values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.params.width + v]
    }
}

/// One-peak template: `tau * max(1 - dist((u,v),(i,j)) / radius, -1)`.
pub fn make_one_peak(params: &TemplateParams, peak: (usize, usize)) -> Result<ActivationTemplate> {
    params.validate()?;
    params.check_peak(peak)?;
    let (i, j) = peak;
    let mut values = Vec::with_capacity(params.cells());
    for u in 0..params.height {
        for v in 0..params.width {
            let du = u as f64 - i as f64;
            let dv = v as f64 - j as f64;
            let dist = (du * du + dv * dv).sqrt();
            values.push(params.tau * (1.0 - dist / params.radius).max(-1.0));
        }
    }
    Ok(ActivationTemplate {
        params: *params,
        kind: TemplateKind::OnePeak(i, j),
        values,
    })
}

/// The "no part present" template: `-tau` everywhere.
pub fn make_negative(params: &TemplateParams) -> Result<ActivationTemplate> {
    params.validate()?;
    Ok(ActivationTemplate {
        params: *params,
        kind: TemplateKind::Negative,
        values: vec![-params.tau; params.cells()],
    })
}

/// Elementwise maximum of two distinct one-peak templates.
pub fn combine_two_peak(
    a: &ActivationTemplate,
    b: &ActivationTemplate,
) -> Result<ActivationTemplate> {
    if a.params != b.params {
        return Err(domain("two-peak operands have different parameters"));
    }
    let (pa, pb) = match (a.kind, b.kind) {
        (TemplateKind::OnePeak(i1, j1), TemplateKind::OnePeak(i2, j2)) => ((i1, j1), (i2, j2)),
        _ => return Err(domain("two-peak operands must both be one-peak templates")),
    };
    if pa == pb {
        return Err(domain(format!("degenerate two-peak template at {pa:?}")));
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x.max(*y))
        .collect();
    Ok(ActivationTemplate {
        params: a.params,
        kind: TemplateKind::TwoPeak(pa.min(pb), pa.max(pb)),
        values,
    })
}

fn make_kind(params: &TemplateParams, kind: TemplateKind) -> Result<ActivationTemplate> {
    match kind {
        TemplateKind::Negative => make_negative(params),
        TemplateKind::OnePeak(i, j) => make_one_peak(params, (i, j)),
        TemplateKind::TwoPeak(p, q) => {
            combine_two_peak(&make_one_peak(params, p)?, &make_one_peak(params, q)?)
        }
    }
}

/// An ordered template collection with a uniform prior.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    params: TemplateParams,
    templates: Vec<ActivationTemplate>,
    prior: f64,
}

impl TemplateSet {
    /// Builds a set from explicit kinds. Rejects duplicates and requires exactly
    /// one negative template.
    pub fn from_kinds(params: &TemplateParams, kinds: &[TemplateKind]) -> Result<Self> {
        params.validate()?;
        let mut seen = std::collections::HashSet::with_capacity(kinds.len());
        let mut negatives = 0;
        let mut templates = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            if !seen.insert(kind) {
                return Err(domain(format!("duplicate template {kind:?}")));
            }
            if kind == TemplateKind::Negative {
                negatives += 1;
            }
            templates.push(make_kind(params, kind)?);
        }
        if negatives != 1 {
            return Err(domain(format!(
                "template set needs exactly one negative template, got {negatives}"
            )));
        }
        Ok(Self {
            params: *params,
            prior: 1.0 / templates.len() as f64,
            templates,
        })
    }

    pub fn params(&self) -> &TemplateParams {
        &self.params
    }

    pub fn templates(&self) -> &[ActivationTemplate] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Uniform prior `1 / len`.
    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn kinds(&self) -> Vec<TemplateKind> {
        self.templates.iter().map(|t| t.kind).collect()
    }
}

/// Canonical order: one-peak templates row-major, then all unordered two-peak
/// pairs in lexicographic order of their row-major indices, then the negative.
fn canonical_kinds(params: &TemplateParams) -> (Vec<TemplateKind>, Vec<TemplateKind>) {
    let cells: Vec<(usize, usize)> = (0..params.height)
        .flat_map(|i| (0..params.width).map(move |j| (i, j)))
        .collect();
    let one = cells.iter().map(|&(i, j)| TemplateKind::OnePeak(i, j)).collect();
    let mut two = Vec::with_capacity(cells.len() * cells.len().saturating_sub(1) / 2);
    for (a, &p) in cells.iter().enumerate() {
        for &q in &cells[a + 1..] {
            two.push(TemplateKind::TwoPeak(p, q));
        }
    }
    (one, two)
}

/// `hw + C(hw, 2) + 1`.
pub fn full_set_size(params: &TemplateParams) -> usize {
    let n = params.cells();
    n + n * n.saturating_sub(1) / 2 + 1
}

/// Every one-peak template, every distinct two-peak combination and the negative.
pub fn build_full_set(params: &TemplateParams) -> Result<TemplateSet> {
    params.validate()?;
    let (one, two) = canonical_kinds(params);
    let mut kinds = one;
    kinds.extend(two);
    kinds.push(TemplateKind::Negative);
    TemplateSet::from_kinds(params, &kinds)
}

/// `count` indices spread over `0..n` with a fixed stride, shifted by a
/// seed-derived phase that keeps the last index in range.
fn strided(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    let stride = n / count;
    let slack = n - (count - 1) * stride;
    let phase = (seed % slack as u64) as usize;
    (0..count).map(|k| phase + k * stride).collect()
}

/// Reduces a set to `target_count` templates, spread evenly over the canonical
/// order.
///
/// The negative template is always kept. All one-peak templates are kept when
/// they fit and the remainder is filled by strided sampling of the two-peak
/// templates; otherwise the one-peak templates are strided too. The seed only
/// selects the phase of the stride.
pub fn subsample_even(full: &TemplateSet, target_count: usize, seed: u64) -> Result<TemplateSet> {
    if target_count < 2 {
        return Err(domain(format!(
            "subsample target must be at least 2, got {target_count}"
        )));
    }
    if target_count > full.len() {
        return Err(domain(format!(
            "subsample target {target_count} exceeds set size {}",
            full.len()
        )));
    }
    let mut one = Vec::new();
    let mut two = Vec::new();
    let mut has_negative = false;
    for kind in full.kinds() {
        match kind {
            TemplateKind::Negative => has_negative = true,
            TemplateKind::OnePeak(..) => one.push(kind),
            TemplateKind::TwoPeak(..) => two.push(kind),
        }
    }
    debug_assert!(has_negative);
    let mut kinds = Vec::with_capacity(target_count);
    if target_count > one.len() {
        let extra = target_count - one.len() - 1;
        kinds.extend_from_slice(&one);
        kinds.extend(strided(two.len(), extra, seed).into_iter().map(|i| two[i]));
    } else {
        kinds.extend(
            strided(one.len(), target_count - 1, seed)
                .into_iter()
                .map(|i| one[i]),
        );
    }
    kinds.push(TemplateKind::Negative);
    TemplateSet::from_kinds(&full.params, &kinds)
}

fn format_value(x: f64) -> String {
    format!("{x:.8e}")
}

/// Text encoding: header `ECT1 <h> <w> <count> <tau> <r>`, then one line per
/// template with its kind tag (`N`, `P i j`, `D i1 j1 i2 j2`) followed by the
/// row-major values at 9 significant digits.
pub fn serialize(set: &TemplateSet) -> Vec<u8> {
    let p = &set.params;
    let mut out = String::new();
    writeln!(
        out,
        "ECT1 {} {} {} {} {}",
        p.height,
        p.width,
        set.len(),
        p.tau,
        p.radius
    )
    .unwrap();
    for t in &set.templates {
        match t.kind {
            TemplateKind::Negative => out.push('N'),
            TemplateKind::OnePeak(i, j) => write!(out, "P {i} {j}").unwrap(),
            TemplateKind::TwoPeak((i1, j1), (i2, j2)) => {
                write!(out, "D {i1} {j1} {i2} {j2}").unwrap()
            }
        }
        for &v in &t.values {
            out.push(' ');
            out.push_str(&format_value(v));
        }
        out.push('\n');
    }
    out.into_bytes()
}

/// Inverse of [`serialize`]. Values are regenerated from the kind tags and
/// parameters, so the round trip is bit-exact; the stored decimals must match
/// the regenerated values at the stored precision.
pub fn deserialize(bytes: &[u8]) -> Result<TemplateSet> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| parse_err(e.valid_up_to(), "stream is not valid UTF-8"))?;
    let mut cursor = LineCursor::new(text);
    let (off, header) = cursor.expect_line("ECT1 header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "ECT1" {
        return Err(parse_err(off, "malformed header, expected `ECT1 h w count tau r`"));
    }
    let height: usize = parse_token(off, header, fields[1], "height")?;
    let width: usize = parse_token(off, header, fields[2], "width")?;
    let count: usize = parse_token(off, header, fields[3], "count")?;
    let tau: f64 = parse_token(off, header, fields[4], "tau")?;
    let radius: f64 = parse_token(off, header, fields[5], "radius")?;
    let params = TemplateParams::new(height, width, tau, radius)
        .map_err(|e| parse_err(off, e.to_string()))?;

    let mut kinds = Vec::with_capacity(count);
    for n in 0..count {
        let (off, line) = cursor
            .next_line()
            .ok_or_else(|| parse_err(cursor.offset(), format!("truncated: header declares {count} templates, found {n}")))?;
        let mut tokens = line.split_whitespace();
        let tag = tokens.next().ok_or_else(|| parse_err(off, "empty template line"))?;
        let mut coord = |what: &str| -> Result<usize> {
            let tok = tokens
                .next()
                .ok_or_else(|| parse_err(off, format!("missing {what}")))?;
            parse_token(off, line, tok, what)
        };
        let kind = match tag {
            "N" => TemplateKind::Negative,
            "P" => TemplateKind::OnePeak(coord("row")?, coord("col")?),
            "D" => {
                let p = (coord("row")?, coord("col")?);
                let q = (coord("row")?, coord("col")?);
                TemplateKind::TwoPeak(p, q)
            }
            other => return Err(parse_err(off, format!("unknown template tag {other:?}"))),
        };
        let template = make_kind(&params, kind).map_err(|e| parse_err(off, e.to_string()))?;
        let mut found = 0;
        for tok in tokens {
            if found >= template.values.len() {
                return Err(parse_err(off, "template line has too many values"));
            }
            let stored: f64 = parse_token(off, line, tok, "value")?;
            if format_value(stored) != format_value(template.values[found]) {
                return Err(parse_err(
                    off,
                    format!("value {found} of {kind:?} does not match the template definition"),
                ));
            }
            found += 1;
        }
        if found != params.cells() {
            return Err(parse_err(
                off,
                format!("dimension mismatch: expected {} values, got {found}", params.cells()),
            ));
        }
        kinds.push(kind);
    }
    if let Some((off, line)) = cursor.next_line() {
        if !line.trim().is_empty() {
            return Err(parse_err(off, "trailing data after declared templates"));
        }
    }
    TemplateSet::from_kinds(&params, &kinds).map_err(|e: Error| parse_err(0, e.to_string()))
}
