//! Distance fields and nearest-neighbour fields over 2D edge maps.
//!
//! All fields are built by one exact two-pass Euclidean distance transform
//! that also carries the index of the closest seed. Among equidistant seeds
//! the smallest `(row, col)` wins.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::camera::Pixel;
use crate::edges::{EdgeMap2D, PixelCoord, NUM_BINS};
use crate::error::{Error, Result};
use crate::grid::Grid;

const NONE: u32 = u32::MAX;

/// Squared distances and seed indices of the exact transform.
struct ExactTransform {
    dist2: Vec<i64>,
    nearest: Vec<u32>,
}

/// Exact Euclidean transform with argmin propagation.
///
/// First pass: for every row, nearest seed column (ties to the left).
/// Second pass: per column, lower envelope of parabolas over rows
/// (ties to the smaller row).
fn exact_transform(width: usize, height: usize, seeds: &[PixelCoord]) -> ExactTransform {
    let (w, h) = (width, height);
    let mut is_seed = vec![false; w * h];
    for p in seeds {
        is_seed[p.y as usize * w + p.x as usize] = true;
    }

    // Pass 1: per row, horizontal distance to nearest seed and its column.
    let mut gcol = vec![NONE; w * h];
    gcol.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let seeds_row = &is_seed[y * w..(y + 1) * w];
        let mut last: Option<usize> = None;
        for x in 0..w {
            if seeds_row[x] {
                last = Some(x);
            }
            if let Some(l) = last {
                row[x] = l as u32;
            }
        }
        let mut next: Option<usize> = None;
        for x in (0..w).rev() {
            if seeds_row[x] {
                next = Some(x);
            }
            if let Some(n) = next {
                let better = match row[x] {
                    NONE => true,
                    l => n - x < x - l as usize,
                };
                if better {
                    row[x] = n as u32;
                }
            }
        }
    });

    // Pass 2: per column, lower envelope over rows.
    let columns: Vec<(Vec<i64>, Vec<u32>)> = (0..w)
        .into_par_iter()
        .map(|x| {
            let mut d2 = vec![i64::MAX; h];
            let mut nn = vec![NONE; h];
            // candidate rows and their heights f(r) = g(r)^2
            let mut v: Vec<usize> = Vec::with_capacity(h);
            let mut z: Vec<f64> = Vec::with_capacity(h + 1);
            let f = |r: usize| {
                let c = gcol[r * w + x];
                let g = c as i64 - x as i64;
                g * g
            };
            for r in 0..h {
                if gcol[r * w + x] == NONE {
                    continue;
                }
                let fr = f(r);
                loop {
                    match v.last() {
                        None => {
                            v.push(r);
                            z.clear();
                            z.push(f64::NEG_INFINITY);
                            break;
                        }
                        Some(&q) => {
                            let fq = f(q);
                            let num = (fr + (r * r) as i64) - (fq + (q * q) as i64);
                            let s = num as f64 / (2 * (r - q)) as f64;
                            if s <= *z.last().unwrap() {
                                v.pop();
                                z.pop();
                                continue;
                            }
                            v.push(r);
                            z.push(s);
                            break;
                        }
                    }
                }
            }
            if v.is_empty() {
                return (d2, nn);
            }
            let mut k = 0;
            for y in 0..h {
                while k + 1 < v.len() && z[k + 1] < y as f64 {
                    k += 1;
                }
                let r = v[k];
                let dy = y as i64 - r as i64;
                d2[y] = f(r) + dy * dy;
                nn[y] = (r * w) as u32 + gcol[r * w + x];
            }
            (d2, nn)
        })
        .collect();

    let mut dist2 = vec![i64::MAX; w * h];
    let mut nearest = vec![NONE; w * h];
    for (x, (d2, nn)) in columns.into_iter().enumerate() {
        for y in 0..h {
            dist2[y * w + x] = d2[y];
            nearest[y * w + x] = nn[y];
        }
    }
    ExactTransform { dist2, nearest }
}

/// Distance to the nearest edge pixel, truncated at `truncation`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub dist: Grid<f32>,
    pub truncation: f64,
}

impl DistanceField {
    pub fn width(&self) -> usize {
        self.dist.width()
    }

    pub fn height(&self) -> usize {
        self.dist.height()
    }

    /// Bilinear interpolation inside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, px: &Pixel) -> Result<f64> {
        let (w, h) = (self.width(), self.height());
        if !(px.x >= 0.0 && px.y >= 0.0 && px.x <= (w - 1) as f64 && px.y <= (h - 1) as f64) {
            return Err(Error::OutOfBounds(px.x, px.y));
        }
        let x0 = (px.x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (px.y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (px.x - x0 as f64, px.y - y0 as f64);
        let d = |x, y| self.dist.at(x, y) as f64;
        let top = d(x0, y0) * (1.0 - fx) + d(x1, y0) * fx;
        let bottom = d(x0, y1) * (1.0 - fx) + d(x1, y1) * fx;
        Ok(top * (1.0 - fy) + bottom * fy)
    }
}

/// Free-function form of [`DistanceField::sample_bilinear`].
pub fn sample_edf_bilinear(field: &DistanceField, px: &Pixel) -> Result<f64> {
    field.sample_bilinear(px)
}

/// Per-pixel index of the nearest edge pixel. Cells farther than the
/// truncation radius (or unreachable) are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct NnField {
    width: usize,
    height: usize,
    nearest: Vec<u32>,
    pub truncation: f64,
}

impl NnField {
    fn empty(width: usize, height: usize, truncation: f64) -> Self {
        Self {
            width,
            height,
            nearest: vec![NONE; width * height],
            truncation,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Stored neighbour at an integer cell, if valid.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<PixelCoord> {
        let v = self.nearest[y * self.width + x];
        (v != NONE).then(|| PixelCoord::new(v % self.width as u32, v / self.width as u32))
    }

    pub fn valid_count(&self) -> usize {
        self.nearest.iter().filter(|&&v| v != NONE).count()
    }

    /// Rounds `px` to the closest cell and returns the stored neighbour.
    pub fn nearest(&self, px: &Pixel) -> Result<Option<PixelCoord>> {
        let (x, y) = round_cell(px, self.width, self.height)?;
        Ok(self.get(x, y))
    }

    fn truncate(&mut self) {
        let t2 = self.truncation * self.truncation;
        let w = self.width;
        for (i, v) in self.nearest.iter_mut().enumerate() {
            if *v == NONE {
                continue;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let (sx, sy) = ((*v as usize % w) as f64, (*v as usize / w) as f64);
            if (x - sx).powi(2) + (y - sy).powi(2) > t2 {
                *v = NONE;
            }
        }
    }

    /// CSV rows `x,y,nn_x,nn_y` for valid cells.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "x,y,nn_x,nn_y")?;
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(n) = self.get(x, y) {
                    writeln!(out, "{x},{y},{},{}", n.x, n.y)?;
                }
            }
        }
        Ok(())
    }
}

fn round_cell(px: &Pixel, w: usize, h: usize) -> Result<(usize, usize)> {
    let (x, y) = (px.x.round(), px.y.round());
    if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
        return Err(Error::OutOfBounds(px.x, px.y));
    }
    Ok((x as usize, y as usize))
}

/// How each orientation layer of an [`OrientedNnField`] is sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Exact,
    /// Exact within Chebyshev `band` of a seed; coarser octaves (`layers` of
    /// them) fill cells adjacent to seeds further out.
    Adaptive { layers: usize, band: usize },
}

impl Sampling {
    pub fn adaptive_default() -> Self {
        Sampling::Adaptive { layers: 3, band: 2 }
    }
}

/// Eight nearest-neighbour fields, one per gradient orientation bin.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedNnField {
    pub bins: Vec<NnField>,
    pub sampling: Sampling,
}

impl OrientedNnField {
    pub fn width(&self) -> usize {
        self.bins[0].width()
    }

    pub fn height(&self) -> usize {
        self.bins[0].height()
    }

    pub fn nearest(&self, px: &Pixel, bin: usize) -> Result<Option<PixelCoord>> {
        self.bins[bin].nearest(px)
    }
}

fn check_nonempty(edges: &EdgeMap2D) -> Result<()> {
    if edges.is_empty() {
        Err(Error::EmptyField)
    } else {
        Ok(())
    }
}

/// Exact Euclidean distance field truncated at `truncation`.
pub fn compute_edf(edges: &EdgeMap2D, truncation: f64) -> Result<DistanceField> {
    check_nonempty(edges)?;
    let t = exact_transform(edges.width, edges.height, &edges.pixels);
    let dist: Vec<f32> = t.dist2.iter().map(|&d2| ((d2 as f64).sqrt().min(truncation)) as f32).collect();
    Ok(DistanceField {
        dist: Grid::from_vec(edges.width, edges.height, dist),
        truncation,
    })
}

fn annf_from_seeds(width: usize, height: usize, seeds: &[PixelCoord], truncation: f64) -> NnField {
    if seeds.is_empty() {
        return NnField::empty(width, height, truncation);
    }
    let t = exact_transform(width, height, seeds);
    let t2 = truncation * truncation;
    let nearest = t
        .nearest
        .into_iter()
        .zip(t.dist2)
        .map(|(n, d2)| if n != NONE && (d2 as f64) <= t2 { n } else { NONE })
        .collect();
    NnField {
        width,
        height,
        nearest,
        truncation,
    }
}

/// Exact nearest-neighbour field truncated at `truncation`.
pub fn compute_annf(edges: &EdgeMap2D, truncation: f64) -> Result<NnField> {
    check_nonempty(edges)?;
    Ok(annf_from_seeds(edges.width, edges.height, &edges.pixels, truncation))
}

/// Seeds of each orientation bin.
pub fn seeds_by_bin(edges: &EdgeMap2D) -> Vec<Vec<PixelCoord>> {
    let mut out = vec![Vec::new(); NUM_BINS];
    for (p, &b) in edges.pixels.iter().zip(&edges.bins) {
        out[b as usize].push(*p);
    }
    out
}

/// Oriented nearest-neighbour field; bins are built in parallel.
pub fn compute_onnf(edges: &EdgeMap2D, truncation: f64, sampling: Sampling) -> Result<OrientedNnField> {
    check_nonempty(edges)?;
    let seeds = seeds_by_bin(edges);
    let (w, h) = (edges.width, edges.height);
    let bins = seeds
        .par_iter()
        .map(|s| match sampling {
            Sampling::Exact => annf_from_seeds(w, h, s, truncation),
            Sampling::Adaptive { layers, band } => adaptive_from_seeds(w, h, s, truncation, layers, band),
        })
        .collect();
    Ok(OrientedNnField { bins, sampling })
}

#[inline]
fn better(cand_d2: i64, cand: u32, cur_d2: i64, cur: u32) -> bool {
    // seed index y*w+x orders exactly like (row, col)
    cand_d2 < cur_d2 || (cand_d2 == cur_d2 && cand < cur)
}

/// Layered nearest-neighbour field.
///
/// Layer 0 splats every seed into a window of Chebyshev radius
/// `floor(sqrt(2) * band)`, which makes it exact within `band`. Layer `l`
/// works on a grid of `2^l` cells, keeps the seed closest to each cell centre
/// among seeds in the cell or its 8 neighbours, and the concatenation copies
/// layers from coarse to fine.
fn adaptive_from_seeds(
    width: usize,
    height: usize,
    seeds: &[PixelCoord],
    truncation: f64,
    layers: usize,
    band: usize,
) -> NnField {
    let mut field = NnField::empty(width, height, truncation);
    if seeds.is_empty() {
        return field;
    }
    let w = width;
    let seed_index = |p: &PixelCoord| p.y * w as u32 + p.x;

    for l in (1..=layers).rev() {
        let cell = 1usize << l;
        let (cw, ch) = (width.div_ceil(cell), height.div_ceil(cell));
        let mut best_d2 = vec![f64::INFINITY; cw * ch];
        let mut best = vec![NONE; cw * ch];
        for p in seeds {
            let (sx, sy) = (p.x as usize / cell, p.y as usize / cell);
            for cy in sy.saturating_sub(1)..=(sy + 1).min(ch - 1) {
                for cx in sx.saturating_sub(1)..=(sx + 1).min(cw - 1) {
                    let centre = |c: usize| (c * cell) as f64 + (cell as f64 - 1.0) / 2.0;
                    let d2 = (centre(cx) - p.x as f64).powi(2) + (centre(cy) - p.y as f64).powi(2);
                    let i = cy * cw + cx;
                    let idx = seed_index(p);
                    if d2 < best_d2[i] || (d2 == best_d2[i] && idx < best[i]) {
                        best_d2[i] = d2;
                        best[i] = idx;
                    }
                }
            }
        }
        for cy in 0..ch {
            for cx in 0..cw {
                let v = best[cy * cw + cx];
                if v == NONE {
                    continue;
                }
                for y in cy * cell..((cy + 1) * cell).min(height) {
                    for x in cx * cell..((cx + 1) * cell).min(width) {
                        field.nearest[y * w + x] = v;
                    }
                }
            }
        }
    }

    let reach = ((2.0f64).sqrt() * band as f64).floor() as i64;
    let mut d2_0 = vec![i64::MAX; w * height];
    let mut nn_0 = vec![NONE; w * height];
    for p in seeds {
        let idx = seed_index(p);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (p.x as i64 + dx, p.y as i64 + dy);
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    continue;
                }
                let i = y as usize * w + x as usize;
                let d2 = dx * dx + dy * dy;
                if better(d2, idx, d2_0[i], nn_0[i]) {
                    d2_0[i] = d2;
                    nn_0[i] = idx;
                }
            }
        }
    }
    for (dst, src) in field.nearest.iter_mut().zip(nn_0) {
        if src != NONE {
            *dst = src;
        }
    }
    field.truncate();
    field
}

/// One of the three field back-ends.
#[derive(Debug, Clone)]
pub enum EdgeField {
    Distance(DistanceField),
    Nearest(NnField),
    Oriented(OrientedNnField),
}

/// Which field back-end registration uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Edf,
    Annf,
    Onnf,
}

impl FieldKind {
    pub const ALL: [FieldKind; 3] = [FieldKind::Edf, FieldKind::Annf, FieldKind::Onnf];

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Edf => "edf",
            FieldKind::Annf => "annf",
            FieldKind::Onnf => "onnf",
        }
    }
}

impl std::fmt::Display for FieldKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "edf" => Ok(FieldKind::Edf),
            "annf" => Ok(FieldKind::Annf),
            "onnf" => Ok(FieldKind::Onnf),
            other => Err(Error::Config(format!("unknown field kind {other:?}"))),
        }
    }
}

impl EdgeField {
    pub fn build(edges: &EdgeMap2D, kind: FieldKind, truncation: f64, sampling: Sampling) -> Result<Self> {
        Ok(match kind {
            FieldKind::Edf => EdgeField::Distance(compute_edf(edges, truncation)?),
            FieldKind::Annf => EdgeField::Nearest(compute_annf(edges, truncation)?),
            FieldKind::Onnf => EdgeField::Oriented(compute_onnf(edges, truncation, sampling)?),
        })
    }

    pub fn kind(&self) -> FieldKind {
        match self {
            EdgeField::Distance(_) => FieldKind::Edf,
            EdgeField::Nearest(_) => FieldKind::Annf,
            EdgeField::Oriented(_) => FieldKind::Onnf,
        }
    }

    pub fn truncation(&self) -> f64 {
        match self {
            EdgeField::Distance(f) => f.truncation,
            EdgeField::Nearest(f) => f.truncation,
            EdgeField::Oriented(f) => f.bins[0].truncation,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            EdgeField::Distance(f) => f.width(),
            EdgeField::Nearest(f) => f.width(),
            EdgeField::Oriented(f) => f.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            EdgeField::Distance(f) => f.height(),
            EdgeField::Nearest(f) => f.height(),
            EdgeField::Oriented(f) => f.height(),
        }
    }
}

/// Lookup for either nearest-neighbour flavour. `bin` is required for
/// oriented fields and ignored otherwise.
pub fn nearest(field: &EdgeField, px: &Pixel, bin: Option<usize>) -> Result<Option<PixelCoord>> {
    match field {
        EdgeField::Nearest(f) => f.nearest(px),
        EdgeField::Oriented(f) => {
            let b = bin.ok_or_else(|| Error::Config("oriented field lookup needs a bin".into()))?;
            f.nearest(px, b)
        }
        EdgeField::Distance(_) => Err(Error::Config("distance fields carry no neighbour indices".into())),
    }
}

/// Default truncation radius per pyramid level (level 0 first).
pub const DEFAULT_TRUNCATION: [f64; 3] = [8.0, 16.0, 32.0];

/// Writes a field's distance (or nearest-neighbour distance) as an 8-bit PNG
/// scaled so that the truncation radius maps to 255. Invalid cells are white.
pub fn write_distance_png(field: &EdgeField, bin: usize, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = (field.width(), field.height());
    let t = field.truncation();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let d = match field {
                EdgeField::Distance(f) => f.dist.at(x, y) as f64,
                EdgeField::Nearest(f) => nn_distance(f, x, y).unwrap_or(t),
                EdgeField::Oriented(f) => nn_distance(&f.bins[bin.min(NUM_BINS - 1)], x, y).unwrap_or(t),
            };
            img.put_pixel(x as u32, y as u32, image::Luma([((d / t).min(1.0) * 255.0).round() as u8]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn nn_distance(f: &NnField, x: usize, y: usize) -> Option<f64> {
    f.get(x, y)
        .map(|n| ((n.x as f64 - x as f64).powi(2) + (n.y as f64 - y as f64).powi(2)).sqrt())
}
