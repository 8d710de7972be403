//! Directory-scale extraction and pseudo-labelling with worker pools.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use regenforge_core::pair::{extract, QaReport, QaThresholds, SeamParams, Verdict, WatermarkPolicy};
use regenforge_core::pseudo::{generate_pseudo_label, StubClassifier, WindowClassifier, WindowSpec};
use regenforge_core::review::QueueEntry;
use regenforge_core::{ClassId, ClassTaxonomy, DatasetManifest, ReviewStatus, SampleRecord, Source};

use crate::error::{Error, Result};
use crate::io;
use crate::plugin::PluginClassifier;

/// One line of `qa.jsonl`. Paths are relative to the file's directory.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub raw_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub report: QaReport,
}

impl QaRecord {
    /// Review-queue entry with paths resolved against `base`.
    pub fn queue_entry(&self, base: &Path) -> QueueEntry {
        let abs = |p: &Option<String>| {
            p.as_deref()
                .map(|p| base.join(p).display().to_string())
                .unwrap_or_default()
        };
        QueueEntry {
            id: self.id.clone(),
            photo_path: abs(&self.photo_path),
            mask_path: abs(&self.mask_path),
            qa: self.report.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExtractOptions {
    pub taxonomy: ClassTaxonomy,
    pub thresholds: QaThresholds,
    pub seam: SeamParams,
    pub watermark: WatermarkPolicy,
    pub jobs: usize,
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub processed: usize,
    pub auto_pass: usize,
    pub needs_review: usize,
    pub auto_reject: usize,
    /// Inputs that could not be processed, with the reason.
    pub quarantined: Vec<(String, String)>,
}

pub const QA_FILE: &str = "qa.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot build worker pool: {e}")))
}

fn extract_one(path: &Path, out: &Path, id: &str, opts: &ExtractOptions) -> Result<QaRecord> {
    let raw = io::read_raster(path)?;
    let ex = extract(&raw, &opts.taxonomy, &opts.thresholds, &opts.seam, &opts.watermark)?;
    let mut record = QaRecord {
        id: id.into(),
        raw_path: path.display().to_string(),
        photo_path: None,
        mask_path: None,
        report: ex.report,
    };
    if let (Some(pair), Some(mask)) = (ex.pair, ex.mask) {
        let photo_rel = format!("photos/{id}.png");
        let mask_rel = format!("masks/{id}.png");
        io::write_raster(&out.join(&photo_rel), &pair.photo)?;
        io::write_id_mask(&out.join(&mask_rel), &mask)?;
        record.photo_path = Some(photo_rel);
        record.mask_path = Some(mask_rel);
    }
    Ok(record)
}

/// Extracts every raster in `input` into `out`. Writes photos, id masks,
/// `qa.jsonl` and a synthetic `manifest.jsonl`.
pub fn extract_dir(input: &Path, out: &Path, opts: &ExtractOptions) -> Result<(ExtractSummary, Vec<QaRecord>)> {
    let files = io::list_images(input)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut seen = BTreeSet::new();
    let mut summary = ExtractSummary::default();
    let mut jobs = Vec::new();
    for f in files {
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if !seen.insert(id.clone()) {
            summary
                .quarantined
                .push((f.display().to_string(), format!("duplicate id '{id}'")));
            continue;
        }
        jobs.push((f, id));
    }
    let start = Instant::now();
    let results: Vec<(PathBuf, Result<QaRecord>)> = pool(opts.jobs)?.install(|| {
        jobs.par_iter()
            .map(|(f, id)| (f.clone(), extract_one(f, out, id, opts)))
            .collect()
    });
    let mut records = Vec::new();
    for (f, r) in results {
        match r {
            Ok(rec) => {
                match rec.report.verdict {
                    Verdict::AutoPass => summary.auto_pass += 1,
                    Verdict::NeedsReview => summary.needs_review += 1,
                    Verdict::AutoReject => summary.auto_reject += 1,
                }
                records.push(rec);
            }
            Err(e) => {
                log::warn!("quarantined {}: {e}", f.display());
                summary.quarantined.push((f.display().to_string(), e.to_string()));
            }
        }
    }
    summary.processed = records.len();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    io::write_jsonl(&out.join(QA_FILE), &records)?;

    let mut manifest = DatasetManifest::for_taxonomy(&opts.taxonomy);
    for rec in &records {
        let (Some(photo), Some(mask)) = (&rec.photo_path, &rec.mask_path) else {
            continue;
        };
        let mut r = SampleRecord::new(rec.id.clone(), Source::Synthetic, photo.clone()).with_mask(mask.clone());
        if rec.report.verdict == Verdict::AutoReject {
            r.review_status = ReviewStatus::Rejected;
            r.defect_tags = rec.report.tags.clone();
        }
        manifest.push(r)?;
    }
    io::write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
    log::info!(
        "extracted {} canvases in {:.2}s: {} pass, {} review, {} reject, {} quarantined",
        summary.processed,
        start.elapsed().as_secs_f64(),
        summary.auto_pass,
        summary.needs_review,
        summary.auto_reject,
        summary.quarantined.len()
    );
    Ok((summary, records))
}

/// How to obtain a window classifier. Each worker gets its own instance.
#[derive(Clone, Debug)]
pub enum ClassifierHandle {
    Plugin { cmd: String, timeout: Duration },
    Stub(StubClassifier),
}

impl ClassifierHandle {
    pub fn instantiate(&self) -> Result<Box<dyn WindowClassifier>> {
        Ok(match self {
            ClassifierHandle::Plugin { cmd, timeout } => Box::new(PluginClassifier::spawn(cmd, *timeout)?),
            ClassifierHandle::Stub(s) => Box::new(s.clone()),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PseudoOptions {
    pub spec: WindowSpec,
    pub jobs: usize,
    pub class_ids: Vec<ClassId>,
    pub ignore_index: ClassId,
    /// Directory for the mask files.
    pub out_dir: PathBuf,
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub images: usize,
    pub written: Vec<String>,
    pub quarantined: Vec<(String, String)>,
    pub seconds: f64,
    pub images_per_second: f64,
}

pub const PSEUDO_SUFFIX: &str = ":pseudo";

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

/// Pseudo-labels every unlabelled record of `manifest`, adding or replacing
/// one `<id>:pseudo` record per image.
pub fn batch_run(
    manifest: &mut DatasetManifest,
    manifest_path: &Path,
    handle: &ClassifierHandle,
    opts: &PseudoOptions,
) -> Result<PseudoSummary> {
    opts.spec.validate()?;
    let subset: Vec<SampleRecord> = manifest.by_source(Source::Unlabelled).cloned().collect();
    let mut summary = PseudoSummary {
        images: subset.len(),
        ..PseudoSummary::default()
    };
    if subset.is_empty() {
        return Ok(summary);
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let start = Instant::now();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<PathBuf>>>> = Mutex::new((0..subset.len()).map(|_| None).collect());
    let workers = opts.jobs.max(1).min(subset.len());
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| -> Result<()> {
                    let mut classifier = handle.instantiate()?;
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(rec) = subset.get(i) else {
                            return Ok(());
                        };
                        let r = label_one(rec, manifest_path, classifier.as_mut(), opts);
                        results.lock().expect("results lock")[i] = Some(r);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    for (rec, r) in subset.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every index visited") {
            Ok(mask_path) => {
                let mut out = rec.clone();
                out.id = format!("{}{PSEUDO_SUFFIX}", rec.id);
                out.source = Source::PseudoLabelled;
                out.mask_path = Some(relative_to(&mask_path, base));
                out.review_status = ReviewStatus::Pending;
                out.defect_tags.clear();
                manifest.records.retain(|r| r.id != out.id);
                manifest.push(out.clone())?;
                summary.written.push(out.id);
            }
            Err(e) => {
                log::warn!("quarantined {}: {e}", rec.id);
                summary.quarantined.push((rec.id.clone(), e.to_string()));
            }
        }
    }
    summary.seconds = start.elapsed().as_secs_f64();
    summary.images_per_second = summary.written.len() as f64 / summary.seconds.max(1e-9);
    log::info!(
        "pseudo-labelled {} of {} images ({:.2} images/s), {} quarantined",
        summary.written.len(),
        summary.images,
        summary.images_per_second,
        summary.quarantined.len()
    );
    Ok(summary)
}

fn label_one(rec: &SampleRecord, manifest_path: &Path, classifier: &mut dyn WindowClassifier, opts: &PseudoOptions) -> Result<PathBuf> {
    let image = io::read_raster(&io::resolve(manifest_path, &rec.image_path))?;
    let mask = generate_pseudo_label(&image, classifier, &opts.spec, &opts.class_ids, opts.ignore_index)?;
    let path = opts.out_dir.join(format!("{}.png", file_safe(&rec.id)));
    io::write_id_mask(&path, &mask)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_become_safe_file_names() {
        assert_eq!(file_safe("site/a b:1.png"), "site_a_b_1.png");
    }
}
