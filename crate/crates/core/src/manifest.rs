//! Provenance-tagged sample records.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::taxonomy::ClassTaxonomy;

/// Where a sample's label came from.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    HandLabelled,
    PseudoLabelled,
    Synthetic,
    /// Real imagery with no label yet; input to pseudo-labelling.
    Unlabelled,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::HandLabelled => "hand_labelled",
            Source::PseudoLabelled => "pseudo_labelled",
            Source::Synthetic => "synthetic",
            Source::Unlabelled => "unlabelled",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "hand_labelled" => Some(Source::HandLabelled),
            "pseudo_labelled" => Some(Source::PseudoLabelled),
            "synthetic" => Some(Source::Synthetic),
            "unlabelled" => Some(Source::Unlabelled),
            _ => None,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    #[default]
    Pending,
    Accepted,
    Rejected,
}

/// Closed set of generation defects recognised during curation.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectTag {
    Hallucination,
    MissingMask,
    Misalignment,
    PaletteLeakInPhoto,
    WrongSemantics,
    WrongViewpoint,
    SizeMismatch,
    Watermark,
}

impl DefectTag {
    pub const ALL: [DefectTag; 8] = [
        DefectTag::Hallucination,
        DefectTag::MissingMask,
        DefectTag::Misalignment,
        DefectTag::PaletteLeakInPhoto,
        DefectTag::WrongSemantics,
        DefectTag::WrongViewpoint,
        DefectTag::SizeMismatch,
        DefectTag::Watermark,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefectTag::Hallucination => "hallucination",
            DefectTag::MissingMask => "missing_mask",
            DefectTag::Misalignment => "misalignment",
            DefectTag::PaletteLeakInPhoto => "palette_leak_in_photo",
            DefectTag::WrongSemantics => "wrong_semantics",
            DefectTag::WrongViewpoint => "wrong_viewpoint",
            DefectTag::SizeMismatch => "size_mismatch",
            DefectTag::Watermark => "watermark",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        DefectTag::ALL.into_iter().find(|t| t.as_str() == text)
    }
}

impl fmt::Display for DefectTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source: Source,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<LatLon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gsd_cm: Option<f64>,
    #[serde(default)]
    pub review_status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defect_tags: Vec<DefectTag>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, source: Source, image_path: impl Into<String>) -> Self {
        SampleRecord {
            id: id.into(),
            source,
            image_path: image_path.into(),
            mask_path: None,
            location: None,
            site_name: None,
            sensor: None,
            gsd_cm: None,
            review_status: ReviewStatus::Pending,
            defect_tags: Vec::new(),
        }
    }

    pub fn with_mask(mut self, mask_path: impl Into<String>) -> Self {
        self.mask_path = Some(mask_path.into());
        self
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.source == Source::Synthetic && self.location.is_some() {
            return Err(ManifestError::SyntheticWithLocation(self.id.clone()));
        }
        if let Some(gsd) = self.gsd_cm {
            if gsd.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) || !gsd.is_finite() {
                return Err(ManifestError::InvalidGsd {
                    id: self.id.clone(),
                    gsd,
                });
            }
        }
        if let Some(loc) = self.location {
            if !(-90.0..=90.0).contains(&loc.lat) || !(-180.0..=180.0).contains(&loc.lon) {
                return Err(ManifestError::InvalidLocation(self.id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManifestError {
    #[error("duplicate record id '{0}'")]
    DuplicateId(String),
    #[error("synthetic record '{0}' must not carry a location")]
    SyntheticWithLocation(String),
    #[error("record '{id}' has non-positive GSD {gsd}")]
    InvalidGsd { id: String, gsd: f64 },
    #[error("record '{0}' has coordinates outside WGS-84 range")]
    InvalidLocation(String),
    #[error("manifest was written for taxonomy {manifest}, loaded taxonomy is {loaded}")]
    TaxonomyMismatch { manifest: String, loaded: String },
}

/// Records bound to the schema digest of the taxonomy they were labelled with.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub taxonomy_hash: String,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(taxonomy_hash: impl Into<String>, records: Vec<SampleRecord>) -> Result<Self, ManifestError> {
        let manifest = DatasetManifest {
            taxonomy_hash: taxonomy_hash.into(),
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn for_taxonomy(taxonomy: &ClassTaxonomy) -> Self {
        DatasetManifest {
            taxonomy_hash: taxonomy.schema_digest(),
            records: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut ids = BTreeSet::new();
        for record in &self.records {
            record.validate()?;
            if !ids.insert(record.id.as_str()) {
                return Err(ManifestError::DuplicateId(record.id.clone()));
            }
        }
        Ok(())
    }

    pub fn check_taxonomy(&self, taxonomy: &ClassTaxonomy) -> Result<(), ManifestError> {
        let loaded = taxonomy.schema_digest();
        if self.taxonomy_hash != loaded {
            return Err(ManifestError::TaxonomyMismatch {
                manifest: self.taxonomy_hash.clone(),
                loaded,
            });
        }
        Ok(())
    }

    /// Appends a record, refusing duplicate ids.
    pub fn push(&mut self, record: SampleRecord) -> Result<(), ManifestError> {
        record.validate()?;
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(ManifestError::DuplicateId(record.id));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn by_source(&self, source: Source) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.source == source)
    }
}
