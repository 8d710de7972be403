//! Sliding-window pseudo-labelling.
//!
//! Each window is classified to a probability vector that is added to every
//! pixel it covers. The label of a pixel is the argmax of its mean vector.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::mask::SemanticMask;
use crate::raster::RgbRaster;
use crate::taxonomy::ClassId;

/// Allowed deviation of a probability vector's sum from 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    Reflect,
    #[default]
    ClampLastWindow,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            size: 224,
            stride: 112,
            pad_policy: PadPolicy::ClampLastWindow,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), PseudoError> {
        if self.size == 0 || self.stride == 0 || self.stride > self.size {
            return Err(PseudoError::InvalidSpec {
                size: self.size,
                stride: self.stride,
            });
        }
        Ok(())
    }
}

/// Window rectangle. Under reflect padding it may extend past the right and
/// bottom image edges.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    /// The part of the window inside a `w` by `h` image.
    pub fn clipped(&self, w: usize, h: usize) -> Window {
        Window {
            x: self.x,
            y: self.y,
            width: self.width.min(w.saturating_sub(self.x)),
            height: self.height.min(h.saturating_sub(self.y)),
        }
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.width && py >= self.y && py < self.y + self.height
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}+{}+{}", self.width, self.height, self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PseudoError {
    #[error("window size {size} and stride {stride} need 1 <= stride <= size")]
    InvalidSpec { size: usize, stride: usize },
    #[error("image of {width}x{height} is empty")]
    EmptyImage { width: usize, height: usize },
    #[error("reflect padding of {pad} px exceeds what a {len} px axis can mirror")]
    ReflectTooLarge { len: usize, pad: usize },
    #[error("classifier failed on window {window}: {message}")]
    Classifier { window: Window, message: String },
    #[error("classifier reports {got} classes, expected {expected}")]
    ClassCount { expected: usize, got: usize },
}

/// Offsets along one axis. The last window is re-anchored to end at the edge.
fn clamped_offsets(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if len <= size {
        return vec![0];
    }
    let mut offsets = Vec::new();
    let mut off = 0;
    loop {
        offsets.push(off);
        if off + size >= len {
            break;
        }
        off += stride;
        if off + size > len {
            offsets.push(len - size);
            break;
        }
    }
    offsets
}

fn reflect_offsets(len: usize, size: usize, stride: usize) -> Result<Vec<usize>, PseudoError> {
    let mut offsets = vec![0];
    let mut off = 0;
    while off + size < len {
        off += stride;
        offsets.push(off);
    }
    let pad = (off + size).saturating_sub(len);
    if pad > 0 && pad >= len {
        return Err(PseudoError::ReflectTooLarge { len, pad });
    }
    Ok(offsets)
}

/// Window rectangles covering a `width` by `height` image, row-major.
pub fn tile(width: usize, height: usize, spec: &WindowSpec) -> Result<Vec<Window>, PseudoError> {
    spec.validate()?;
    if width == 0 || height == 0 {
        return Err(PseudoError::EmptyImage { width, height });
    }
    let (xs, ys, ww, wh) = match spec.pad_policy {
        PadPolicy::ClampLastWindow => (
            clamped_offsets(width, spec.size, spec.stride),
            clamped_offsets(height, spec.size, spec.stride),
            spec.size.min(width),
            spec.size.min(height),
        ),
        PadPolicy::Reflect => (
            reflect_offsets(width, spec.size, spec.stride)?,
            reflect_offsets(height, spec.size, spec.stride)?,
            spec.size,
            spec.size,
        ),
    };
    let mut windows = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            windows.push(Window {
                x,
                y,
                width: ww,
                height: wh,
            });
        }
    }
    Ok(windows)
}

fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

/// Pixels under a window; positions past the edge are mirrored without
/// repeating the edge pixel.
pub fn window_crop(image: &RgbRaster, window: &Window) -> RgbRaster {
    let mut out = RgbRaster::filled(window.width, window.height, crate::taxonomy::Rgb([0, 0, 0]))
        .expect("window dimensions are positive");
    for dy in 0..window.height {
        let sy = reflect_index(window.y + dy, image.height());
        for dx in 0..window.width {
            let sx = reflect_index(window.x + dx, image.width());
            out.set(dx, dy, image.get(sx, sy));
        }
    }
    out
}

/// Per-pixel probability sums and window coverage counts.
#[derive(Clone, PartialEq, Debug)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    k: usize,
    scores: Vec<f64>,
    coverage: Vec<u32>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, k: usize) -> Self {
        ScoreMap {
            width,
            height,
            k,
            scores: vec![0.0; width * height * k],
            coverage: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn coverage(&self, x: usize, y: usize) -> u32 {
        self.coverage[y * self.width + x]
    }

    pub fn min_coverage(&self) -> u32 {
        self.coverage.iter().copied().min().unwrap_or(0)
    }

    pub fn add(&mut self, window: &Window, probs: &[f64]) {
        assert_eq!(probs.len(), self.k, "probability vector length");
        let clip = window.clipped(self.width, self.height);
        for y in clip.y..clip.y + clip.height {
            for x in clip.x..clip.x + clip.width {
                let p = y * self.width + x;
                self.coverage[p] += 1;
                for (s, v) in self.scores[p * self.k..(p + 1) * self.k].iter_mut().zip(probs) {
                    *s += v;
                }
            }
        }
    }

    /// Adds another partial map of the same shape.
    pub fn merge(&mut self, other: &ScoreMap) {
        assert!(self.width == other.width && self.height == other.height && self.k == other.k);
        for (a, b) in self.scores.iter_mut().zip(&other.scores) {
            *a += b;
        }
        for (a, b) in self.coverage.iter_mut().zip(&other.coverage) {
            *a += b;
        }
    }

    /// Argmax of coverage-normalised scores. `class_ids[i]` names vector
    /// entry `i`; ties go to the lowest class id. Uncovered pixels are
    /// `ignore_index`.
    pub fn to_mask(&self, class_ids: &[ClassId], ignore_index: ClassId) -> SemanticMask {
        assert_eq!(class_ids.len(), self.k);
        let mut data = Vec::with_capacity(self.width * self.height);
        for p in 0..self.width * self.height {
            let cov = self.coverage[p];
            if cov == 0 {
                data.push(ignore_index);
                continue;
            }
            let mut best: Option<(f64, ClassId)> = None;
            for (i, &s) in self.scores[p * self.k..(p + 1) * self.k].iter().enumerate() {
                let v = s / f64::from(cov);
                let id = class_ids[i];
                best = match best {
                    Some((bv, bid)) if bv > v || (bv == v && bid < id) => Some((bv, bid)),
                    _ => Some((v, id)),
                };
            }
            data.push(best.map_or(ignore_index, |b| b.1));
        }
        SemanticMask::new(self.width, self.height, data, ignore_index).expect("buffer sized from dimensions")
    }
}

pub struct WindowRequest<'a> {
    pub window: Window,
    pub image_width: usize,
    pub image_height: usize,
    pub crop: &'a RgbRaster,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ClassifierError(pub String);

/// Anything that maps a window crop to a probability vector of length
/// `num_classes`.
pub trait WindowClassifier {
    fn num_classes(&self) -> usize;
    fn classify(&mut self, request: &WindowRequest<'_>) -> Result<Vec<f64>, ClassifierError>;
}

/// Length, finiteness and unit-sum checks for a classifier response.
pub fn validate_probs(probs: &[f64], k: usize) -> Result<(), ClassifierError> {
    if probs.len() != k {
        return Err(ClassifierError(alloc::format!(
            "vector has {} entries, expected {k}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(ClassifierError("vector contains a non-finite value".into()));
    }
    if probs.iter().any(|&p| p < 0.0) {
        return Err(ClassifierError("vector contains a negative value".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(ClassifierError(alloc::format!("vector sums to {sum}")));
    }
    Ok(())
}

fn classify_checked<C: WindowClassifier + ?Sized>(
    classifier: &mut C,
    image: &RgbRaster,
    window: Window,
) -> Result<Vec<f64>, PseudoError> {
    let crop = window_crop(image, &window);
    let request = WindowRequest {
        window,
        image_width: image.width(),
        image_height: image.height(),
        crop: &crop,
    };
    let k = classifier.num_classes();
    let mut last = None;
    for _ in 0..2 {
        match classifier.classify(&request).and_then(|p| validate_probs(&p, k).map(|_| p)) {
            Ok(p) => return Ok(p),
            Err(e) => last = Some(e),
        }
    }
    Err(PseudoError::Classifier {
        window,
        message: last.map(|e| e.0).unwrap_or_default(),
    })
}

/// Classifies `windows` in the given order and accumulates their scores.
pub fn accumulate_windows<C: WindowClassifier + ?Sized>(
    image: &RgbRaster,
    classifier: &mut C,
    windows: &[Window],
) -> Result<ScoreMap, PseudoError> {
    let mut map = ScoreMap::new(image.width(), image.height(), classifier.num_classes());
    for &window in windows {
        let probs = classify_checked(classifier, image, window)?;
        map.add(&window, &probs);
    }
    Ok(map)
}

/// Full-image pseudo-label. `class_ids[i]` names probability entry `i`.
pub fn generate_pseudo_label<C: WindowClassifier + ?Sized>(
    image: &RgbRaster,
    classifier: &mut C,
    spec: &WindowSpec,
    class_ids: &[ClassId],
    ignore_index: ClassId,
) -> Result<SemanticMask, PseudoError> {
    if classifier.num_classes() != class_ids.len() {
        return Err(PseudoError::ClassCount {
            expected: class_ids.len(),
            got: classifier.num_classes(),
        });
    }
    let windows = tile(image.width(), image.height(), spec)?;
    let map = accumulate_windows(image, classifier, &windows)?;
    Ok(map.to_mask(class_ids, ignore_index))
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StubRule {
    /// Always one-hot on `class`.
    Constant { class: usize },
    /// One-hot chosen by the quadrant of the window centre relative to the
    /// image centre: top-left, top-right, bottom-left, bottom-right.
    CentroidQuadrant { classes: [usize; 4] },
    /// One-hot on `above` when the crop's mean luma is at least `threshold`.
    ColourMeanThreshold { threshold: f64, below: usize, above: usize },
}

/// Rule-driven classifier for tests and demos.
#[derive(Clone, PartialEq, Debug)]
pub struct StubClassifier {
    pub num_classes: usize,
    pub rule: StubRule,
}

impl StubClassifier {
    pub fn new(num_classes: usize, rule: StubRule) -> Self {
        StubClassifier { num_classes, rule }
    }

    pub fn class_for(&self, request: &WindowRequest<'_>) -> usize {
        match &self.rule {
            StubRule::Constant { class } => *class,
            StubRule::CentroidQuadrant { classes } => {
                let clip = request.window.clipped(request.image_width, request.image_height);
                let right = 2 * clip.x + clip.width >= request.image_width;
                let bottom = 2 * clip.y + clip.height >= request.image_height;
                classes[usize::from(right) + 2 * usize::from(bottom)]
            }
            StubRule::ColourMeanThreshold { threshold, below, above } => {
                let luma = request.crop.luma();
                let mean = luma.iter().sum::<f64>() / luma.len().max(1) as f64;
                if mean >= *threshold {
                    *above
                } else {
                    *below
                }
            }
        }
    }
}

impl WindowClassifier for StubClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn classify(&mut self, request: &WindowRequest<'_>) -> Result<Vec<f64>, ClassifierError> {
        let class = self.class_for(request);
        if class >= self.num_classes {
            return Err(ClassifierError(alloc::format!("stub class {class} out of range")));
        }
        let mut probs = vec![0.0; self.num_classes];
        probs[class] = 1.0;
        Ok(probs)
    }
}
