//! Split-screen pair extraction and automated quality checks.
//!
//! A generated canvas holds a photo on the left and its colour-coded mask on
//! the right. The seam is searched near the middle, the halves are trimmed to
//! equal width, and the QA battery scores the defects that can be measured
//! without a human: size mismatch, unmapped mask colours, palette colours in
//! the photo, and disagreement between mask boundaries and photo edges.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use crate::manifest::DefectTag;
use crate::mask::{decode_mask, SemanticMask};
use crate::raster::RgbRaster;
use crate::taxonomy::{ClassTaxonomy, Rgb};

/// Largest width difference between the halves that cropping may absorb.
pub const MAX_WIDTH_SLACK: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PairError {
    #[error("raw canvas is {0} px wide, at least 2 needed")]
    TooNarrow(usize),
    #[error("no seam found near the middle (best continuity {best:.3} at column {column})")]
    SeamNotFound { column: usize, best: f64 },
    #[error("photo is {photo:?} and mask is {mask:?} (width x height)")]
    SizeMismatch { photo: (usize, usize), mask: (usize, usize) },
    #[error("watermark crop {width}x{height} does not fit inside {image_width}x{image_height}")]
    CropOutOfBounds {
        width: usize,
        height: usize,
        image_width: usize,
        image_height: usize,
    },
}

impl PairError {
    pub fn defect_tag(&self) -> Option<DefectTag> {
        match self {
            PairError::SeamNotFound { .. } | PairError::SizeMismatch { .. } => Some(DefectTag::SizeMismatch),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct SeamParams {
    /// Half-width of the search window as a fraction of the canvas width.
    pub search_fraction: f64,
    /// A seam must have continuity below this value.
    pub max_continuity: f64,
}

impl Default for SeamParams {
    fn default() -> Self {
        SeamParams {
            search_fraction: 0.02,
            max_continuity: 0.8,
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct SplitPair {
    pub photo: RgbRaster,
    pub mask_raster: RgbRaster,
    /// First column of the mask half in the raw canvas.
    pub seam_column: usize,
    /// Raw columns dropped to equalise the halves, ascending.
    pub removed_columns: Vec<usize>,
    pub watermark_cropped: bool,
}

fn column_distance(raw: &RgbRaster, a: usize, b: usize) -> f64 {
    let sum: u64 = (0..raw.height())
        .map(|y| u64::from(raw.get(a, y).chebyshev(raw.get(b, y))))
        .sum();
    sum as f64 / raw.height() as f64
}

/// Ratio of the colour change inside each side to the change across column
/// `c`. Low values mean a sharp break between two smooth regions.
pub fn seam_continuity(raw: &RgbRaster, c: usize) -> f64 {
    let cross = column_distance(raw, c - 1, c);
    let within = 0.5 * (column_distance(raw, c - 2, c - 1) + column_distance(raw, c, c + 1));
    (within + 1.0) / (cross + 1.0)
}

pub fn find_seam(raw: &RgbRaster, params: &SeamParams) -> Result<usize, PairError> {
    let w = raw.width();
    if w < 2 {
        return Err(PairError::TooNarrow(w));
    }
    let centre = w / 2;
    if w < 4 {
        return Ok(centre);
    }
    let radius = (libm::round(params.search_fraction * w as f64) as usize).max(1);
    let lo = centre.saturating_sub(radius).max(2);
    let hi = (centre + radius).min(w - 2);
    let mut best: Option<(f64, usize, usize)> = None;
    for c in lo..=hi {
        let v = seam_continuity(raw, c);
        let key = (v, c.abs_diff(centre), c);
        if best.is_none_or(|b| key.0 < b.0 || (key.0 == b.0 && (key.1, key.2) < (b.1, b.2))) {
            best = Some(key);
        }
    }
    match best {
        Some((v, _, c)) if v < params.max_continuity => Ok(c),
        Some((v, _, c)) => Err(PairError::SeamNotFound { column: c, best: v }),
        None => Ok(centre),
    }
}

fn is_band_colour(c: Rgb) -> bool {
    c.0.iter().all(|&v| v >= 240)
}

fn uniform_band(pixels: impl Iterator<Item = Rgb>) -> bool {
    let mut first = None;
    for p in pixels {
        match first {
            None => {
                if !is_band_colour(p) {
                    return false;
                }
                first = Some(p);
            }
            Some(f) => {
                if p.chebyshev(f) > 8 {
                    return false;
                }
            }
        }
    }
    first.is_some()
}

/// Width and height of a half after stripping uniform near-white
/// letterbox bands from its edges. Bands shorter than 2 px or 1% of the
/// dimension are not counted.
pub fn content_dims(img: &RgbRaster) -> (usize, usize) {
    let (w, h) = (img.width(), img.height());
    let row = |y: usize| uniform_band((0..w).map(move |x| img.get(x, y)));
    let col = |x: usize| uniform_band((0..h).map(move |y| img.get(x, y)));
    let run = |n: usize, test: &dyn Fn(usize) -> bool, from_start: bool| {
        let mut k = 0;
        while k < n && test(if from_start { k } else { n - 1 - k }) {
            k += 1;
        }
        k
    };
    let trim = |n: usize, test: &dyn Fn(usize) -> bool| {
        let min_run = (n / 100).max(2);
        let a = run(n, test, true);
        if a == n {
            return n;
        }
        let b = run(n, test, false);
        let count = |r: usize| if r >= min_run { r } else { 0 };
        n - count(a) - count(b)
    };
    (trim(w, &col), trim(h, &row))
}

/// Splits a raw canvas into photo and mask halves of equal size.
pub fn split_pair(raw: &RgbRaster, params: &SeamParams) -> Result<SplitPair, PairError> {
    let seam = find_seam(raw, params)?;
    let (w, h) = (raw.width(), raw.height());
    let (lw, rw) = (seam, w - seam);
    if lw.abs_diff(rw) > MAX_WIDTH_SLACK {
        return Err(PairError::SizeMismatch {
            photo: (lw, h),
            mask: (rw, h),
        });
    }
    let mut removed = Vec::new();
    match lw.abs_diff(rw) {
        0 => {}
        1 if lw > rw => removed.push(0),
        1 => removed.push(w - 1),
        _ if lw > rw => removed.extend([0, seam - 1]),
        _ => removed.extend([seam, w - 1]),
    }
    let keep = |x: usize| !removed.contains(&x);
    let photo_cols: Vec<usize> = (0..seam).filter(|&x| keep(x)).collect();
    let mask_cols: Vec<usize> = (seam..w).filter(|&x| keep(x)).collect();
    let gather = |cols: &[usize]| {
        let mut pixels = Vec::with_capacity(cols.len() * h);
        for y in 0..h {
            for &x in cols {
                pixels.push(raw.get(x, y));
            }
        }
        RgbRaster::new(cols.len(), h, pixels).map_err(|_| PairError::TooNarrow(w))
    };
    let photo = gather(&photo_cols)?;
    let mask_raster = gather(&mask_cols)?;
    let (pd, md) = (content_dims(&photo), content_dims(&mask_raster));
    if pd.0.abs_diff(md.0) > MAX_WIDTH_SLACK || pd.1.abs_diff(md.1) > MAX_WIDTH_SLACK {
        return Err(PairError::SizeMismatch { photo: pd, mask: md });
    }
    Ok(SplitPair {
        photo,
        mask_raster,
        seam_column: seam,
        removed_columns: removed,
        watermark_cropped: false,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// A watermark box anchored at a corner of each half.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct WatermarkSpec {
    pub corner: Corner,
    pub width: usize,
    pub height: usize,
}

/// Removes the watermark box by dropping the full-width row band or the
/// full-height column band through it, whichever loses fewer pixels (rows on
/// a tie). Photo and mask are cropped identically.
pub fn crop_watermark(pair: &SplitPair, spec: &WatermarkSpec) -> Result<SplitPair, PairError> {
    let (w, h) = (pair.photo.width(), pair.photo.height());
    if spec.width == 0 || spec.height == 0 {
        return Ok(pair.clone());
    }
    if spec.width >= w || spec.height >= h {
        return Err(PairError::CropOutOfBounds {
            width: spec.width,
            height: spec.height,
            image_width: w,
            image_height: h,
        });
    }
    let top = matches!(spec.corner, Corner::TopLeft | Corner::TopRight);
    let left = matches!(spec.corner, Corner::TopLeft | Corner::BottomLeft);
    let rect = if spec.height * w <= spec.width * h {
        let y = if top { spec.height } else { 0 };
        (0, y, w, h - spec.height)
    } else {
        let x = if left { spec.width } else { 0 };
        (x, 0, w - spec.width, h)
    };
    let crop = |img: &RgbRaster| {
        img.crop(rect.0, rect.1, rect.2, rect.3)
            .map_err(|_| PairError::CropOutOfBounds {
                width: spec.width,
                height: spec.height,
                image_width: w,
                image_height: h,
            })
    };
    Ok(SplitPair {
        photo: crop(&pair.photo)?,
        mask_raster: crop(&pair.mask_raster)?,
        seam_column: pair.seam_column,
        removed_columns: pair.removed_columns.clone(),
        watermark_cropped: true,
    })
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct QaThresholds {
    /// Chebyshev tolerance when decoding mask colours.
    pub colour_tolerance: u8,
    /// A photo pixel this close to a palette colour counts as leakage.
    pub leak_tolerance: u8,
    pub leakage_pass: f64,
    /// Leakage above this rejects outright. Off when `None`.
    pub leakage_reject: Option<f64>,
    pub unmapped_pass: f64,
    /// Unmapped fraction above this is treated as a missing mask.
    pub unmapped_reject: f64,
    /// Mean boundary-to-edge distance, in pixels.
    pub misalignment_pass: f64,
    /// Sobel magnitude on luma above which a photo pixel is an edge.
    pub edge_threshold: f64,
    /// Distances are capped at this many pixels.
    pub strip_px: u32,
}

impl Default for QaThresholds {
    fn default() -> Self {
        QaThresholds {
            colour_tolerance: 24,
            leak_tolerance: 6,
            leakage_pass: 0.01,
            leakage_reject: None,
            unmapped_pass: 0.01,
            unmapped_reject: 0.25,
            misalignment_pass: 2.0,
            edge_threshold: 100.0,
            strip_px: 16,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AutoPass,
    NeedsReview,
    AutoReject,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct QaReport {
    pub size_mismatch: bool,
    pub photo_dims: (usize, usize),
    pub mask_dims: (usize, usize),
    pub palette_leakage_fraction: f64,
    pub unmapped_fraction: f64,
    pub misalignment_score: f64,
    pub watermark_cropped: bool,
    pub verdict: Verdict,
    pub tags: Vec<DefectTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seam_column: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QaReport {
    /// Larger means more likely to be rejected. Used to order review queues.
    pub fn severity(&self) -> f64 {
        let mut s = self.palette_leakage_fraction + self.unmapped_fraction + self.misalignment_score / 16.0;
        if self.size_mismatch {
            s += 10.0;
        }
        s
    }

    /// Report for a canvas that could not be split.
    pub fn from_split_error(err: &PairError, raw_dims: (usize, usize)) -> Self {
        let (photo, mask) = match err {
            PairError::SizeMismatch { photo, mask } => (*photo, *mask),
            _ => ((raw_dims.0 / 2, raw_dims.1), (raw_dims.0 - raw_dims.0 / 2, raw_dims.1)),
        };
        QaReport {
            size_mismatch: true,
            photo_dims: photo,
            mask_dims: mask,
            palette_leakage_fraction: 0.0,
            unmapped_fraction: 0.0,
            misalignment_score: 0.0,
            watermark_cropped: false,
            verdict: Verdict::AutoReject,
            tags: err.defect_tag().into_iter().collect(),
            seam_column: None,
            error: Some(alloc::format!("{err}")),
        }
    }
}

/// Verdict and tags from the numeric fields. Raising any score never moves
/// the verdict toward `AutoPass`.
pub fn classify(
    size_mismatch: bool,
    leakage: f64,
    unmapped: f64,
    misalignment: f64,
    watermark_cropped: bool,
    t: &QaThresholds,
) -> (Verdict, Vec<DefectTag>) {
    let mut reject = Vec::new();
    if size_mismatch {
        reject.push(DefectTag::SizeMismatch);
    }
    if unmapped > t.unmapped_reject {
        reject.push(DefectTag::MissingMask);
    }
    if t.leakage_reject.is_some_and(|cap| leakage > cap) {
        reject.push(DefectTag::PaletteLeakInPhoto);
    }
    let mut tags = reject.clone();
    let mut review = false;
    if leakage > t.leakage_pass && !tags.contains(&DefectTag::PaletteLeakInPhoto) {
        tags.push(DefectTag::PaletteLeakInPhoto);
        review = true;
    }
    if unmapped > t.unmapped_pass && !tags.contains(&DefectTag::MissingMask) {
        tags.push(DefectTag::MissingMask);
        review = true;
    }
    if misalignment > t.misalignment_pass {
        tags.push(DefectTag::Misalignment);
        review = true;
    }
    if watermark_cropped {
        tags.push(DefectTag::Watermark);
    }
    tags.sort();
    let verdict = if !reject.is_empty() {
        Verdict::AutoReject
    } else if review {
        Verdict::NeedsReview
    } else {
        Verdict::AutoPass
    };
    (verdict, tags)
}

/// Fraction of photo pixels within `tolerance` of any palette colour.
pub fn palette_leakage(photo: &RgbRaster, taxonomy: &ClassTaxonomy, tolerance: u8) -> f64 {
    if photo.pixels().is_empty() {
        return 0.0;
    }
    let palette: Vec<Rgb> = taxonomy.palette_entries().into_iter().map(|(c, _)| c).collect();
    let mut cache = alloc::collections::BTreeMap::new();
    let hits = photo
        .pixels()
        .iter()
        .filter(|&&p| *cache.entry(p).or_insert_with(|| palette.iter().any(|&c| c.chebyshev(p) <= tolerance)))
        .count();
    hits as f64 / photo.pixels().len() as f64
}

/// Sobel gradient magnitude of the luma channel, edges replicated.
pub fn sobel_magnitude(img: &RgbRaster) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let luma = img.luma();
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        luma[cy * w + cx]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out[y as usize * w + x as usize] = libm::sqrt(gx * gx + gy * gy);
        }
    }
    out
}

/// Chessboard distance to the nearest `true` cell, capped at `cap`.
pub fn chessboard_distance(seeds: &[bool], w: usize, h: usize, cap: u32) -> Vec<u32> {
    let mut d: Vec<u32> = seeds.iter().map(|&s| if s { 0 } else { cap }).collect();
    for y in 0..h {
        for x in 0..w {
            let mut v = d[y * w + x];
            if x > 0 {
                v = v.min(d[y * w + x - 1] + 1);
            }
            if y > 0 {
                v = v.min(d[(y - 1) * w + x] + 1);
                if x > 0 {
                    v = v.min(d[(y - 1) * w + x - 1] + 1);
                }
                if x + 1 < w {
                    v = v.min(d[(y - 1) * w + x + 1] + 1);
                }
            }
            d[y * w + x] = v;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut v = d[y * w + x];
            if x + 1 < w {
                v = v.min(d[y * w + x + 1] + 1);
            }
            if y + 1 < h {
                v = v.min(d[(y + 1) * w + x] + 1);
                if x + 1 < w {
                    v = v.min(d[(y + 1) * w + x + 1] + 1);
                }
                if x > 0 {
                    v = v.min(d[(y + 1) * w + x - 1] + 1);
                }
            }
            d[y * w + x] = v;
        }
    }
    d
}

/// Pixels with a 4-neighbour of a different class.
pub fn mask_boundary(mask: &SemanticMask) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = mask.get(x, y);
            let differs = (x > 0 && mask.get(x - 1, y) != c)
                || (x + 1 < w && mask.get(x + 1, y) != c)
                || (y > 0 && mask.get(x, y - 1) != c)
                || (y + 1 < h && mask.get(x, y + 1) != c);
            out[y * w + x] = differs;
        }
    }
    out
}

/// Mean capped distance from mask boundary pixels to the nearest photo edge.
/// Zero when the mask has no internal boundary.
pub fn misalignment_score(photo: &RgbRaster, mask: &SemanticMask, t: &QaThresholds) -> f64 {
    let (w, h) = (mask.width(), mask.height());
    let edges: Vec<bool> = sobel_magnitude(photo).iter().map(|&m| m >= t.edge_threshold).collect();
    let dist = chessboard_distance(&edges, w, h, t.strip_px);
    let boundary = mask_boundary(mask);
    let (mut sum, mut n) = (0u64, 0u64);
    for (i, &b) in boundary.iter().enumerate() {
        if b {
            sum += u64::from(dist[i]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Decodes the mask half and scores the pair.
pub fn qa_pair(pair: &SplitPair, taxonomy: &ClassTaxonomy, t: &QaThresholds) -> (SemanticMask, QaReport) {
    let (mask, unmapped) = decode_mask(&pair.mask_raster, taxonomy, t.colour_tolerance);
    let leakage = palette_leakage(&pair.photo, taxonomy, t.leak_tolerance);
    let misalignment = misalignment_score(&pair.photo, &mask, t);
    let (verdict, tags) = classify(false, leakage, unmapped.fraction, misalignment, pair.watermark_cropped, t);
    let report = QaReport {
        size_mismatch: false,
        photo_dims: (pair.photo.width(), pair.photo.height()),
        mask_dims: (pair.mask_raster.width(), pair.mask_raster.height()),
        palette_leakage_fraction: leakage,
        unmapped_fraction: unmapped.fraction,
        misalignment_score: misalignment,
        watermark_cropped: pair.watermark_cropped,
        verdict,
        tags,
        seam_column: Some(pair.seam_column),
        error: None,
    };
    (mask, report)
}

/// How extraction treats generator watermarks.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "mode", content = "spec", rename_all = "snake_case")]
pub enum WatermarkPolicy {
    #[default]
    Off,
    /// Crop the box from every pair.
    Always(WatermarkSpec),
    /// Crop only pairs where [`detect_watermark`] fires.
    Detect(WatermarkSpec),
}

/// Minimum unmapped share inside the corner box for a stamp to count.
pub const WATERMARK_MIN_BOX_FRACTION: f64 = 0.05;

/// Flags a stamp in the corner box of the mask half: the box holds at least
/// [`WATERMARK_MIN_BOX_FRACTION`] unmapped pixels while the rest of the mask
/// decodes within `t.unmapped_pass`.
pub fn detect_watermark(mask_raster: &RgbRaster, taxonomy: &ClassTaxonomy, spec: &WatermarkSpec, t: &QaThresholds) -> bool {
    let (w, h) = (mask_raster.width(), mask_raster.height());
    if spec.width == 0 || spec.height == 0 || spec.width >= w || spec.height >= h {
        return false;
    }
    let x0 = if matches!(spec.corner, Corner::TopLeft | Corner::BottomLeft) { 0 } else { w - spec.width };
    let y0 = if matches!(spec.corner, Corner::TopLeft | Corner::TopRight) { 0 } else { h - spec.height };
    let entries = taxonomy.palette_entries();
    let (mut inside, mut outside) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if crate::mask::nearest_class(&entries, mask_raster.get(x, y), t.colour_tolerance).is_some() {
                continue;
            }
            if (x0..x0 + spec.width).contains(&x) && (y0..y0 + spec.height).contains(&y) {
                inside += 1;
            } else {
                outside += 1;
            }
        }
    }
    let box_px = spec.width * spec.height;
    let rest_px = w * h - box_px;
    inside as f64 / box_px as f64 >= WATERMARK_MIN_BOX_FRACTION && outside as f64 / rest_px as f64 <= t.unmapped_pass
}

/// Result of running split, optional watermark crop, and QA on one canvas.
#[derive(Clone, PartialEq, Debug)]
pub struct Extraction {
    pub pair: Option<SplitPair>,
    pub mask: Option<SemanticMask>,
    pub report: QaReport,
}

pub fn extract(
    raw: &RgbRaster,
    taxonomy: &ClassTaxonomy,
    t: &QaThresholds,
    seam: &SeamParams,
    watermark: &WatermarkPolicy,
) -> Result<Extraction, PairError> {
    let pair = match split_pair(raw, seam) {
        Ok(p) => p,
        Err(e @ (PairError::SizeMismatch { .. } | PairError::SeamNotFound { .. })) => {
            return Ok(Extraction {
                pair: None,
                mask: None,
                report: QaReport::from_split_error(&e, (raw.width(), raw.height())),
            })
        }
        Err(e) => return Err(e),
    };
    let pair = match watermark {
        WatermarkPolicy::Always(spec) => crop_watermark(&pair, spec)?,
        WatermarkPolicy::Detect(spec) if detect_watermark(&pair.mask_raster, taxonomy, spec, t) => {
            crop_watermark(&pair, spec)?
        }
        _ => pair,
    };
    let (mask, report) = qa_pair(&pair, taxonomy, t);
    Ok(Extraction {
        pair: Some(pair),
        mask: Some(mask),
        report,
    })
}
