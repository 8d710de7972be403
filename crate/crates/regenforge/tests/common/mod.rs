#![allow(dead_code)]

use std::path::{Path, PathBuf};

use regenforge::batch::{extract_dir, ExtractOptions, QaRecord};
use regenforge::fixtures::fixture_watermark_policy;
use regenforge_core::pair::{QaThresholds, SeamParams};
use regenforge_core::ClassTaxonomy;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pairs")
}

/// Extracts the shipped fixture corpus into `out`.
pub fn extract_fixtures(out: &Path) -> Vec<QaRecord> {
    let opts = ExtractOptions {
        taxonomy: ClassTaxonomy::forest_regeneration_generation(),
        thresholds: QaThresholds::default(),
        seam: SeamParams::default(),
        watermark: fixture_watermark_policy(),
        jobs: 2,
    };
    extract_dir(&fixture_dir(), out, &opts).unwrap().1
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_regenforge")
}
