//! Core algorithms for turning split-screen image generator outputs into
//! curated semantic segmentation training data, and for measuring and
//! evaluating the resulting datasets.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, subprocess
//! plugins, the review HTTP service and the command line live in the
//! `regenforge` crate.

#![no_std]

extern crate alloc;

pub mod distance;
pub mod eval;
pub mod folds;
pub mod manifest;
pub mod mask;
pub mod mix;
pub mod pair;
pub mod prompt;
pub mod pseudo;
pub mod raster;
pub mod review;
pub mod stats;
pub mod taxonomy;

pub use manifest::{DatasetManifest, DefectTag, ReviewStatus, SampleRecord, Source};
pub use mask::{decode_mask, encode_mask, SemanticMask, UnmappedReport};
pub use raster::RgbRaster;
pub use taxonomy::{ClassDef, ClassId, ClassTaxonomy, Rank, Rgb, Shade};

use alloc::string::String;

pub(crate) fn hex_encode(bytes: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push(char::from(DIGITS[usize::from(b >> 4)]));
        out.push(char::from(DIGITS[usize::from(b & 0x0f)]));
    }
    out
}

/// Mean and population standard deviation. `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    if values.iter().all(|&v| v == values[0]) {
        return Some((values[0], 0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, libm::sqrt(var)))
}
