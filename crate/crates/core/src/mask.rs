//! Dense class-id masks and conversion to and from palette rasters.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::raster::{RasterError, RgbRaster};
use crate::taxonomy::{ClassId, ClassTaxonomy, Rgb};

/// How many unmapped colours an [`UnmappedReport`] keeps.
pub const TOP_UNMAPPED_COLOURS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {width}x{height}")]
    Empty { width: usize, height: usize },
    #[error("mask buffer holds {actual} cells, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("cell ({x}, {y}) holds id {id}, which is neither a class nor the ignore index")]
    InvalidId { x: usize, y: usize, id: ClassId },
    #[error("mask ignore index {mask} differs from taxonomy ignore index {taxonomy}")]
    IgnoreMismatch { mask: ClassId, taxonomy: ClassId },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Row-major grid of class ids. Cells equal to `ignore_index` carry no label.
#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    ignore_index: ClassId,
    data: Vec<ClassId>,
}

impl SemanticMask {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<ClassId>,
        ignore_index: ClassId,
    ) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::Empty { width, height });
        }
        if data.len() != width * height {
            return Err(MaskError::BufferSize {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(SemanticMask {
            width,
            height,
            ignore_index,
            data,
        })
    }

    pub fn filled(
        width: usize,
        height: usize,
        id: ClassId,
        ignore_index: ClassId,
    ) -> Result<Self, MaskError> {
        Self::new(width, height, vec![id; width * height], ignore_index)
    }

    /// Builds a mask and checks every cell against `taxonomy`.
    pub fn with_taxonomy(
        width: usize,
        height: usize,
        data: Vec<ClassId>,
        taxonomy: &ClassTaxonomy,
    ) -> Result<Self, MaskError> {
        let mask = Self::new(width, height, data, taxonomy.ignore_index())?;
        mask.validate(taxonomy)?;
        Ok(mask)
    }

    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<(), MaskError> {
        if self.ignore_index != taxonomy.ignore_index() {
            return Err(MaskError::IgnoreMismatch {
                mask: self.ignore_index,
                taxonomy: taxonomy.ignore_index(),
            });
        }
        for (i, &id) in self.data.iter().enumerate() {
            if id != self.ignore_index && !taxonomy.contains_id(id) {
                return Err(MaskError::InvalidId {
                    x: i % self.width,
                    y: i / self.width,
                    id,
                });
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ignore_index(&self) -> ClassId {
        self.ignore_index
    }

    pub fn data(&self) -> &[ClassId] {
        &self.data
    }

    pub fn into_data(self) -> Vec<ClassId> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> ClassId {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: ClassId) {
        self.data[y * self.width + x] = id;
    }

    pub fn is_ignored(&self, id: ClassId) -> bool {
        id == self.ignore_index
    }

    /// Pixel count per class id, ignore excluded.
    pub fn class_pixel_counts(&self) -> BTreeMap<ClassId, u64> {
        let mut counts = BTreeMap::new();
        for &id in self.data.iter().filter(|&&id| id != self.ignore_index) {
            *counts.entry(id).or_insert(0u64) += 1;
        }
        counts
    }

    pub fn ignored_pixels(&self) -> u64 {
        self.data.iter().filter(|&&id| id == self.ignore_index).count() as u64
    }

    pub fn distinct_classes(&self) -> BTreeSet<ClassId> {
        self.data
            .iter()
            .copied()
            .filter(|&id| id != self.ignore_index)
            .collect()
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale(&self, factor: usize) -> SemanticMask {
        assert!(factor >= 1, "upscale factor must be at least 1");
        let width = self.width * factor;
        let height = self.height * factor;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(self.get(x / factor, y / factor));
            }
        }
        SemanticMask {
            width,
            height,
            ignore_index: self.ignore_index,
            data,
        }
    }

    /// Quarter turn clockwise.
    pub fn rotate90(&self) -> SemanticMask {
        let width = self.height;
        let height = self.width;
        let mut data = vec![0; width * height];
        for y in 0..self.height {
            for x in 0..self.width {
                let nx = self.height - 1 - y;
                let ny = x;
                data[ny * width + nx] = self.get(x, y);
            }
        }
        SemanticMask {
            width,
            height,
            ignore_index: self.ignore_index,
            data,
        }
    }
}

/// Pixels of a palette raster that matched no class within tolerance.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct UnmappedReport {
    pub unmapped_pixels: u64,
    pub total_pixels: u64,
    pub fraction: f64,
    /// Most frequent unmapped colours, most frequent first.
    pub top_colours: Vec<(Rgb, u64)>,
}

/// Finds the class whose primary colour or shade is nearest to `colour` in
/// Chebyshev distance, if that distance is within `tolerance`. Ties go to
/// the lowest class id.
pub fn nearest_class(entries: &[(Rgb, ClassId)], colour: Rgb, tolerance: u8) -> Option<ClassId> {
    let mut best: Option<(u8, ClassId)> = None;
    for &(palette_colour, id) in entries {
        let d = palette_colour.chebyshev(colour);
        if d > tolerance {
            continue;
        }
        best = match best {
            Some((bd, bid)) if bd < d || (bd == d && bid <= id) => Some((bd, bid)),
            _ => Some((d, id)),
        };
    }
    best.map(|(_, id)| id)
}

/// Converts a palette raster to a mask. Pixels matching no palette colour
/// within `tolerance` become ignore and are tallied in the report.
pub fn decode_mask(
    image: &RgbRaster,
    taxonomy: &ClassTaxonomy,
    tolerance: u8,
) -> (SemanticMask, UnmappedReport) {
    let entries = taxonomy.palette_entries();
    let ignore = taxonomy.ignore_index();
    let mut cache: BTreeMap<Rgb, Option<ClassId>> = BTreeMap::new();
    let mut unmapped: BTreeMap<Rgb, u64> = BTreeMap::new();
    let mut data = Vec::with_capacity(image.pixels().len());

    for &colour in image.pixels() {
        let class = *cache
            .entry(colour)
            .or_insert_with(|| nearest_class(&entries, colour, tolerance));
        match class {
            Some(id) => data.push(id),
            None => {
                data.push(ignore);
                *unmapped.entry(colour).or_insert(0) += 1;
            }
        }
    }

    let total = data.len() as u64;
    let unmapped_pixels: u64 = unmapped.values().sum();
    let mut top_colours: Vec<(Rgb, u64)> = unmapped.into_iter().collect();
    top_colours.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    top_colours.truncate(TOP_UNMAPPED_COLOURS);

    let mask = SemanticMask {
        width: image.width(),
        height: image.height(),
        ignore_index: ignore,
        data,
    };
    let report = UnmappedReport {
        unmapped_pixels,
        total_pixels: total,
        fraction: if total == 0 {
            0.0
        } else {
            unmapped_pixels as f64 / total as f64
        },
        top_colours,
    };
    (mask, report)
}

/// Paints each cell with its class's primary colour. Ignore cells get the
/// taxonomy's sentinel colour.
pub fn encode_mask(mask: &SemanticMask, taxonomy: &ClassTaxonomy) -> Result<RgbRaster, MaskError> {
    mask.validate(taxonomy)?;
    let sentinel = taxonomy.sentinel_colour();
    let pixels = mask
        .data
        .iter()
        .map(|&id| match taxonomy.get(id) {
            Some(class) => class.colour,
            None => sentinel,
        })
        .collect();
    Ok(RgbRaster::new(mask.width, mask.height, pixels)?)
}
