//! Attention maps and the geometric primitives the losses are built on.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("empty map")]
    EmptyMap,
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
}

/// A non-negative H×W grid stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "grid data length");
        Self { height, width, data }
    }

    /// Builds a map from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        let data = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), width, "ragged rows");
                r.iter().copied()
            })
            .collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (idx, _) = self
            .data
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (idx / self.width, idx % self.width)
    }

    fn same_shape(&self, other: &Self) -> Result<(), MapError> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(MapError::Shape(self.height, self.width, other.height, other.width))
        }
    }

    /// Pixelwise mean of several maps of one shape.
    pub fn mean_of<'a>(maps: impl IntoIterator<Item = &'a AttentionMap>) -> Option<AttentionMap> {
        let mut iter = maps.into_iter();
        let first = iter.next()?;
        let mut acc = first.clone();
        let mut n = 1.0;
        for m in iter {
            for (a, b) in acc.data.iter_mut().zip(&m.data) {
                *a += b;
            }
            n += 1.0;
        }
        acc.data.iter_mut().for_each(|v| *v /= n);
        Some(acc)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        for row in self.data.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// 8-bit binary PGM; values are clamped to [0,1] and scaled to [0,255].
    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.width, self.height, &self.data)
    }
}

pub(crate) fn encode_pgm(width: usize, height: usize, data: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// One map per prompt token at a single timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub timestep: usize,
    pub maps: Vec<AttentionMap>,
}

impl AttentionStack {
    pub fn new(timestep: usize, maps: Vec<AttentionMap>) -> Self {
        if let Some(first) = maps.first() {
            debug_assert!(maps
                .iter()
                .all(|m| m.height == first.height && m.width == first.width));
        }
        Self { timestep, maps }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.maps.first().map_or((0, 0), |m| (m.height, m.width))
    }

    /// Mean of the maps at `indices`.
    pub fn aggregate(&self, indices: &[usize]) -> AttentionMap {
        AttentionMap::mean_of(indices.iter().map(|&i| &self.maps[i])).unwrap_or_else(|| {
            let (h, w) = self.resolution();
            AttentionMap::zeros(h, w)
        })
    }
}

/// `(m - min) / (max - min)`; a constant map becomes all zeros.
pub fn normalize_maxmin(m: &AttentionMap) -> AttentionMap {
    let (lo, hi) = m
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        m.data.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; m.data.len()]
    };
    AttentionMap::from_vec(m.height, m.width, data)
}

/// Soft intersection over union, `Σ a·b / Σ (a + b)`. Zero when both maps are zero.
pub fn iou(a: &AttentionMap, b: &AttentionMap) -> Result<f64, MapError> {
    a.same_shape(b)?;
    Ok(iou_slices(&a.data, &b.data))
}

/// Neumaier-compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(self) -> f64 {
        self.sum + self.carry
    }
}

pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Compensated::default();
    values.into_iter().for_each(|v| acc.add(v));
    acc.value()
}

fn overlap_sums(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (mut num, mut den) = (Compensated::default(), Compensated::default());
    for (x, y) in a.iter().zip(b) {
        num.add(x * y);
        den.add(*x);
        den.add(*y);
    }
    (num.value(), den.value())
}

pub(crate) fn iou_slices(a: &[f64], b: &[f64]) -> f64 {
    let (num, den) = overlap_sums(a, b);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accumulates `scale · ∂iou/∂a` and `scale · ∂iou/∂b`.
pub(crate) fn iou_backward(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (num, den) = overlap_sums(a, b);
    if den == 0.0 {
        return;
    }
    let value = num / den;
    for p in 0..a.len() {
        ga[p] += scale * (b[p] - value) / den;
        gb[p] += scale * (a[p] - value) / den;
    }
}

/// Center of mass along an axis. `Axis::X` weights by column, `Axis::Y` by row.
pub fn center_of_mass(m: &AttentionMap, axis: crate::constraints::Axis) -> Result<f64, MapError> {
    center_of_mass_with(m, axis, CenterMode::MassNormalized)
}

/// Whether the first moment is divided by total mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterMode {
    #[default]
    MassNormalized,
    /// Raw first moment `Σ coord · m`, no division.
    Unnormalized,
}

pub fn center_of_mass_with(
    m: &AttentionMap,
    axis: crate::constraints::Axis,
    mode: CenterMode,
) -> Result<f64, MapError> {
    let (anchor, offset) = center_parts(&m.data, m.width, axis, mode)?;
    Ok(anchor + offset)
}

/// Center split as `anchor + offset`. In mass-normalized mode the anchor is
/// the coordinate of the largest value, which keeps the moment sums small and
/// the offset accurate; differences of centers should subtract anchors and
/// offsets separately.
pub(crate) fn center_parts(
    data: &[f64],
    width: usize,
    axis: crate::constraints::Axis,
    mode: CenterMode,
) -> Result<(f64, f64), MapError> {
    let anchor = match mode {
        CenterMode::MassNormalized => {
            let peak = data
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (p, &v)| if v > best.1 { (p, v) } else { best });
            coord(peak.0, width, axis)
        }
        CenterMode::Unnormalized => 0.0,
    };
    let (mut moment, mut mass) = (Compensated::default(), Compensated::default());
    for (p, &v) in data.iter().enumerate() {
        moment.add((coord(p, width, axis) - anchor) * v);
        mass.add(v);
    }
    let (moment, mass) = (moment.value(), mass.value());
    if mass <= 0.0 {
        return Err(MapError::EmptyMap);
    }
    Ok(match mode {
        CenterMode::MassNormalized => (anchor, moment / mass),
        CenterMode::Unnormalized => (0.0, moment),
    })
}

#[inline]
pub(crate) fn coord(p: usize, width: usize, axis: crate::constraints::Axis) -> f64 {
    match axis {
        crate::constraints::Axis::X => (p % width) as f64,
        crate::constraints::Axis::Y => (p / width) as f64,
    }
}

/// Accumulates `scale · ∂E/∂m` into `g`.
pub(crate) fn center_backward(
    data: &[f64],
    width: usize,
    axis: crate::constraints::Axis,
    mode: CenterMode,
    scale: f64,
    g: &mut [f64],
) {
    match mode {
        CenterMode::MassNormalized => {
            let Ok((anchor, offset)) = center_parts(data, width, axis, mode) else {
                return;
            };
            let mass = compensated_sum(data.iter().copied());
            for (p, gp) in g.iter_mut().enumerate() {
                *gp += scale * ((coord(p, width, axis) - anchor) - offset) / mass;
            }
        }
        CenterMode::Unnormalized => {
            for (p, gp) in g.iter_mut().enumerate() {
                *gp += scale * coord(p, width, axis);
            }
        }
    }
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.row_min + self.row_max) as f64 / 2.0,
            (self.col_min + self.col_max) as f64 / 2.0,
        )
    }
}

/// Nearest-neighbour upscale by an integer factor.
pub fn upscale(m: &AttentionMap, factor: usize) -> AttentionMap {
    let factor = factor.max(1);
    let (h, w) = (m.height * factor, m.width * factor);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(m.get(r / factor, c / factor));
        }
    }
    AttentionMap::from_vec(h, w, data)
}

/// Separable truncated Gaussian blur, radius `ceil(3σ)`, edges clamped.
pub fn gaussian_blur(m: &AttentionMap, sigma: f64) -> AttentionMap {
    if sigma <= 0.0 {
        return m.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (m.height as isize, m.width as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let off = ki as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r, (c + off).clamp(0, w - 1))
                    } else {
                        ((r + off).clamp(0, h - 1), c)
                    };
                    acc += k * src[(rr * w + cc) as usize];
                }
                out[(r * w + c) as usize] = acc;
            }
        }
        out
    };
    let tmp = pass(&m.data, true);
    AttentionMap::from_vec(m.height, m.width, pass(&tmp, false))
}

/// Upscale, blur, normalize, keep the top 10% of pixels and return the tight
/// box of the largest 4-connected component.
pub fn extract_bbox(m: &AttentionMap, upscale_factor: usize, blur_sigma: f64) -> Result<BoundingBox, MapError> {
    if m.sum() <= 0.0 {
        return Err(MapError::EmptyMap);
    }
    let up = upscale(m, upscale_factor);
    let blurred = gaussian_blur(&up, blur_sigma);
    let norm = normalize_maxmin(&blurred);
    if norm.data.iter().all(|&v| v == 0.0) {
        return Err(MapError::EmptyMap);
    }
    let threshold = percentile(&norm.data, 0.9);
    let mask: Vec<bool> = norm.data.iter().map(|&v| v >= threshold && v > 0.0).collect();
    largest_component_box(&mask, norm.height, norm.width).ok_or(MapError::EmptyMap)
}

/// Linear-interpolated quantile of the values.
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn largest_component_box(mask: &[bool], h: usize, w: usize) -> Option<BoundingBox> {
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(usize, BoundingBox)> = None;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut area = 0;
        let mut bb = BoundingBox {
            row_min: usize::MAX,
            row_max: 0,
            col_min: usize::MAX,
            col_max: 0,
        };
        while let Some(p) = queue.pop_front() {
            area += 1;
            let (r, c) = (p / w, p % w);
            bb.row_min = bb.row_min.min(r);
            bb.row_max = bb.row_max.max(r);
            bb.col_min = bb.col_min.min(c);
            bb.col_max = bb.col_max.max(c);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if best.as_ref().is_none_or(|(a, _)| area > *a) {
            best = Some((area, bb));
        }
    }
    best.map(|(_, bb)| bb)
}
