//! File-level drivers behind the analysis commands. Each returns a
//! serialisable report; the command line decides where it goes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use regenforge_core::distance::{fid, format_pp, mmd_squared, relative_report};
use regenforge_core::eval::{metrics, pool, ConfusionMatrix, MeanStd, MetricsReport, Scoring};
use regenforge_core::folds::{
    assign_folds, attach_class_totals, cluster_sites, exclude_near, verify_assignment, FoldAssignment, GeoPoint,
    Site, SiteCluster, VerifyReport,
};
use regenforge_core::mix::{make_sampler, seen_pixel_report, BatchPlan, MixConfig};
use regenforge_core::prompt::{
    build_zero_shot_prompt, plan_generation, render_prompt, AttributeAssignment, AttributeSpace, ClassFilter,
    ZeroShotPrompt,
};
use regenforge_core::stats::{aggregate_mask_stats, class_distribution, mask_stats, Connectivity};
use regenforge_core::{
    decode_mask, ClassId, ClassTaxonomy, DatasetManifest, ReviewStatus, SampleRecord, SemanticMask, Source,
};

use crate::error::{Error, Result};
use crate::io;

/// Reads a mask as greyscale ids or, failing that, as an exact-colour
/// palette raster.
pub fn load_mask(path: &Path, taxonomy: &ClassTaxonomy) -> Result<SemanticMask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mask = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            SemanticMask::new(w, h, g.into_raw(), taxonomy.ignore_index())?
        }
        other => {
            let rgb = other.to_rgb8();
            let raster = regenforge_core::RgbRaster::from_rgb_bytes(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())?;
            let (mask, report) = decode_mask(&raster, taxonomy, 0);
            if report.unmapped_pixels > 0 {
                log::warn!(
                    "{}: {} pixels match no palette colour",
                    path.display(),
                    report.unmapped_pixels
                );
            }
            mask
        }
    };
    mask.validate(taxonomy)?;
    Ok(mask)
}

fn par_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot build worker pool: {e}")))
}

/// Records with a mask, filtered by source and review status.
pub fn select_records(manifest: &DatasetManifest, source: Option<Source>, accepted_only: bool) -> Vec<&SampleRecord> {
    manifest
        .records
        .iter()
        .filter(|r| r.mask_path.is_some())
        .filter(|r| source.is_none_or(|s| r.source == s))
        .filter(|r| {
            if accepted_only {
                r.review_status == ReviewStatus::Accepted
            } else {
                r.review_status != ReviewStatus::Rejected
            }
        })
        .collect()
}

fn load_record_masks(
    manifest_path: &Path,
    records: &[&SampleRecord],
    taxonomy: &ClassTaxonomy,
    jobs: usize,
) -> Result<Vec<SemanticMask>> {
    par_pool(jobs)?.install(|| {
        records
            .par_iter()
            .map(|r| load_mask(&io::resolve(manifest_path, r.mask_path.as_deref().unwrap_or_default()), taxonomy))
            .collect()
    })
}

/// Per-record class pixel counts.
pub fn pixel_counts(
    manifest_path: &Path,
    records: &[&SampleRecord],
    taxonomy: &ClassTaxonomy,
    jobs: usize,
) -> Result<BTreeMap<String, BTreeMap<ClassId, u64>>> {
    let masks = load_record_masks(manifest_path, records, taxonomy, jobs)?;
    Ok(records
        .iter()
        .zip(masks)
        .map(|(r, m)| (r.id.clone(), m.class_pixel_counts()))
        .collect())
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ClassShare {
    pub id: ClassId,
    pub name: String,
    pub percent: f64,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct StatsReport {
    pub source: Option<Source>,
    pub accepted_only: bool,
    pub connectivity: Connectivity,
    pub n_masks: usize,
    pub mipq: MeanStd,
    pub instances: MeanStd,
    pub class_distribution: Vec<ClassShare>,
    pub table: Vec<String>,
}

pub fn dataset_stats(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    taxonomy: &ClassTaxonomy,
    source: Option<Source>,
    accepted_only: bool,
    connectivity: Connectivity,
    jobs: usize,
) -> Result<StatsReport> {
    let records = select_records(manifest, source, accepted_only);
    let masks = load_record_masks(manifest_path, &records, taxonomy, jobs)?;
    let per_mask = par_pool(jobs)?.install(|| {
        masks
            .par_iter()
            .map(|m| mask_stats(m, connectivity))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;
    let mipqs: Vec<f64> = per_mask.iter().map(|s| s.mipq).collect();
    let instances: Vec<f64> = per_mask.iter().map(|s| s.total_instances() as f64).collect();
    let agg = aggregate_mask_stats(&mipqs, &instances)?;
    let dist = class_distribution(&masks)?;
    let class_distribution = dist
        .iter()
        .map(|(&id, &share)| ClassShare {
            id,
            name: taxonomy.get(id).map(|c| c.name.clone()).unwrap_or_else(|| id.to_string()),
            percent: 100.0 * share,
        })
        .collect();
    let mipq = MeanStd {
        mean: agg.mean_mipq,
        std: agg.std_mipq,
    };
    let inst = MeanStd {
        mean: agg.mean_instances,
        std: agg.std_instances,
    };
    let label = source.map(|s| s.as_str()).unwrap_or("all");
    let table = vec![
        format!("{:<16} {:>8} {:>20} {:>20}", "source", "masks", "mIPQ", "instances"),
        format!(
            "{:<16} {:>8} {:>20} {:>20}",
            label,
            agg.n_masks,
            mipq.to_string(),
            inst.to_string()
        ),
    ];
    Ok(StatsReport {
        source,
        accepted_only,
        connectivity,
        n_masks: agg.n_masks,
        mipq,
        instances: inst,
        class_distribution,
        table,
    })
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ClassScore {
    pub id: ClassId,
    pub name: String,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub n_pairs: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub scoring: Scoring,
    pub metrics: MetricsReport,
    pub per_class: Vec<ClassScore>,
    pub classes: Vec<String>,
    /// Rows are ground truth, columns predictions.
    pub confusion_counts: Vec<Vec<u64>>,
    /// Per ground-truth class: pixels predicted as ignore.
    pub confusion_rejects: Vec<u64>,
    /// As counts, with the reject column appended; rows sum to 1.
    pub confusion_row_normalised: Vec<Vec<f64>>,
    pub ignored_pixels: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldScore>,
    /// Unweighted mean of per-fold macro F1, for contrast with the pooled
    /// value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_mean_macro_f1: Option<f64>,
}

fn masks_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for p in io::list_images(dir)? {
        if let Some(stem) = p.file_stem() {
            out.insert(stem.to_string_lossy().into_owned(), p);
        }
    }
    Ok(out)
}

/// Scores every ground-truth mask in `gt_dir` against the same-named mask
/// in `pred_dir`. With a fold map, folds are scored separately and pooled.
pub fn eval_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    taxonomy: &ClassTaxonomy,
    scoring: Scoring,
    fold_map: Option<&BTreeMap<String, usize>>,
) -> Result<EvalReport> {
    let gt = masks_by_stem(gt_dir)?;
    let pred = masks_by_stem(pred_dir)?;
    if gt.is_empty() {
        return Err(Error::Usage(format!("no masks in {}", gt_dir.display())));
    }
    let missing: Vec<&String> = gt.keys().filter(|k| !pred.contains_key(*k)).collect();
    if !missing.is_empty() {
        return Err(Error::Usage(format!(
            "{} ground-truth masks have no prediction in {}: {}",
            missing.len(),
            pred_dir.display(),
            missing.iter().take(5).map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let k = taxonomy.classes().iter().map(|c| usize::from(c.id) + 1).max().unwrap_or(0);
    let ignore = taxonomy.ignore_index();
    let mut per_fold: BTreeMap<usize, (ConfusionMatrix, usize)> = BTreeMap::new();
    for (stem, gt_path) in &gt {
        let fold = match fold_map {
            Some(map) => *map
                .get(stem)
                .ok_or_else(|| Error::Usage(format!("'{stem}' is not in the fold map")))?,
            None => 0,
        };
        let g = load_mask(gt_path, taxonomy)?;
        let p = load_mask(&pred[stem], taxonomy)?;
        let entry = per_fold.entry(fold).or_insert_with(|| (ConfusionMatrix::new(k, ignore), 0));
        entry.0.accumulate(&p, &g)?;
        entry.1 += 1;
    }
    let matrices: Vec<ConfusionMatrix> = per_fold.values().map(|(m, _)| m.clone()).collect();
    let pooled = pool(&matrices)?;
    let report = metrics(&pooled, scoring)?;
    let mut folds = Vec::new();
    if fold_map.is_some() {
        for (&fold, (m, n)) in &per_fold {
            folds.push(FoldScore {
                fold,
                n_pairs: *n,
                metrics: metrics(m, scoring)?,
            });
        }
    }
    let fold_mean_macro_f1 =
        (!folds.is_empty()).then(|| folds.iter().map(|f| f.metrics.macro_f1).sum::<f64>() / folds.len() as f64);
    let name = |c: usize| {
        taxonomy
            .get(c as ClassId)
            .map(|d| d.name.clone())
            .unwrap_or_else(|| format!("class {c}"))
    };
    let per_class = (0..k)
        .filter(|&c| taxonomy.contains_id(c as ClassId))
        .map(|c| ClassScore {
            id: c as ClassId,
            name: name(c),
            f1: report.per_class_f1[c],
            iou: report.per_class_iou[c],
        })
        .collect();
    Ok(EvalReport {
        n_pairs: gt.len(),
        scoring,
        per_class,
        classes: (0..k).map(name).collect(),
        confusion_counts: (0..k).map(|g| (0..k).map(|p| pooled.get(g, p)).collect()).collect(),
        confusion_rejects: (0..k).map(|g| pooled.rejects(g)).collect(),
        confusion_row_normalised: pooled.row_normalised(),
        ignored_pixels: pooled.ignored_pixels(),
        metrics: report,
        folds,
        fold_mean_macro_f1,
    })
}

/// One line of a fold map file.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct FoldMapEntry {
    pub id: String,
    pub fold: usize,
}

pub fn read_fold_map(path: &Path) -> Result<BTreeMap<String, usize>> {
    let rows: Vec<FoldMapEntry> = io::read_jsonl(path)?;
    let mut map = BTreeMap::new();
    for r in rows {
        if map.insert(r.id.clone(), r.fold).is_some() {
            return Err(Error::format(path, format!("id '{}' appears twice", r.id)));
        }
    }
    Ok(map)
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub label: String,
    pub fid: f64,
    pub cmmd: f64,
    pub fid_percent: f64,
    pub cmmd_percent: f64,
    pub fid_relative: String,
    pub cmmd_relative: String,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DistanceReport {
    pub reference: String,
    pub other: String,
    pub dim: usize,
    pub bandwidth: f64,
    pub fid: f64,
    /// Unbiased squared MMD; may be slightly negative.
    pub cmmd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineComparison>,
}

/// Distances from `reference` to `other`, and optionally how they compare
/// with the distances from `reference` to `baseline`.
pub fn distance_report(reference: &Path, other: &Path, baseline: Option<&Path>, bandwidth: f64) -> Result<DistanceReport> {
    let a = io::read_embeddings(reference)?;
    let b = io::read_embeddings(other)?;
    let f = fid(&a, &b)?;
    let m = mmd_squared(&a, &b, bandwidth)?;
    let baseline = match baseline {
        None => None,
        Some(path) => {
            let c = io::read_embeddings(path)?;
            let bf = fid(&a, &c)?;
            let bm = mmd_squared(&a, &c, bandwidth)?;
            let label = c.label().to_string();
            let fd = &relative_report(&[(label.clone(), bf), ("other".into(), f)], &label)?[0];
            let md = &relative_report(&[(label.clone(), bm), ("other".into(), m)], &label)?[0];
            Some(BaselineComparison {
                label,
                fid: bf,
                cmmd: bm,
                fid_percent: fd.percent,
                cmmd_percent: md.percent,
                fid_relative: format_pp(fd.percent),
                cmmd_relative: format_pp(md.percent),
            })
        }
    };
    Ok(DistanceReport {
        reference: a.label().to_string(),
        other: b.label().to_string(),
        dim: a.dim(),
        bandwidth,
        fid: f,
        cmmd: m,
        baseline,
    })
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FoldsReport {
    pub k: usize,
    pub separation_km: f64,
    pub clusters: Vec<SiteCluster>,
    pub assignment: FoldAssignment,
    pub verify: VerifyReport,
    pub fold_map: Vec<FoldMapEntry>,
    /// Records without a known site, left out of the fold map.
    pub unplaced: Vec<String>,
    /// Pseudo-labelled records kept for pre-training when an exclusion
    /// filter is requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_kept: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_excluded: Option<Vec<String>>,
}

/// Clusters sites, assigns folds and maps every labelled record to its
/// site's fold. Records name their site in `site_name`.
#[allow(clippy::too_many_arguments)]
pub fn build_folds(
    sites: &[(String, f64, f64)],
    manifest_path: &Path,
    manifest: &DatasetManifest,
    taxonomy: &ClassTaxonomy,
    k: usize,
    separation_km: f64,
    exclude_near_folds: Option<&[usize]>,
    jobs: usize,
) -> Result<FoldsReport> {
    let sites: Vec<Site> = sites
        .iter()
        .map(|(id, lat, lon)| Site::new(id.clone(), *lat, *lon))
        .collect::<std::result::Result<_, _>>()?;
    let site_ids: BTreeSet<&str> = sites.iter().map(|s| s.id.as_str()).collect();
    let labelled: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| matches!(r.source, Source::HandLabelled | Source::Synthetic) && r.review_status != ReviewStatus::Rejected)
        .collect();
    let (placed, unplaced): (Vec<&SampleRecord>, Vec<&SampleRecord>) = labelled
        .into_iter()
        .partition(|r| r.site_name.as_deref().is_some_and(|s| site_ids.contains(s)));
    let with_mask: Vec<&SampleRecord> = placed.iter().copied().filter(|r| r.mask_path.is_some()).collect();
    let counts = pixel_counts(manifest_path, &with_mask, taxonomy, jobs)?;
    let mut per_site: BTreeMap<String, BTreeMap<ClassId, u64>> = BTreeMap::new();
    for r in &with_mask {
        let site = per_site.entry(r.site_name.clone().expect("placed")).or_default();
        for (&c, &n) in &counts[&r.id] {
            *site.entry(c).or_insert(0) += n;
        }
    }
    let mut clusters = cluster_sites(&sites, separation_km)?;
    attach_class_totals(&mut clusters, &per_site);
    let assignment = assign_folds(&clusters, k)?;
    let verify = verify_assignment(&assignment, &sites, separation_km)?;
    let fold_map = placed
        .iter()
        .map(|r| FoldMapEntry {
            id: r.id.clone(),
            fold: assignment
                .fold_of(r.site_name.as_deref().expect("placed"))
                .expect("every site is assigned"),
        })
        .collect();
    let (pretrain_kept, pretrain_excluded) = match exclude_near_folds {
        None => (None, None),
        Some(held) => {
            let reference: Vec<GeoPoint> = sites
                .iter()
                .filter(|s| assignment.fold_of(&s.id).is_some_and(|f| held.contains(&f)))
                .map(|s| s.point)
                .collect();
            let candidates: Vec<&SampleRecord> = manifest
                .records
                .iter()
                .filter(|r| matches!(r.source, Source::PseudoLabelled | Source::Unlabelled))
                .collect();
            let kept: BTreeSet<&str> = exclude_near(
                &candidates,
                |r| r.location.and_then(|l| GeoPoint::new(l.lat, l.lon).ok()),
                &reference,
                separation_km,
            )
            .into_iter()
            .map(|r| r.id.as_str())
            .collect();
            let (k, x): (Vec<&&SampleRecord>, Vec<&&SampleRecord>) =
                candidates.iter().partition(|r| kept.contains(r.id.as_str()));
            (
                Some(k.iter().map(|r| r.id.clone()).collect()),
                Some(x.iter().map(|r| r.id.clone()).collect()),
            )
        }
    };
    Ok(FoldsReport {
        k,
        separation_km,
        clusters,
        assignment,
        verify,
        fold_map,
        unplaced: unplaced.iter().map(|r| r.id.clone()).collect(),
        pretrain_kept,
        pretrain_excluded,
    })
}

/// Drops records whose fold is in `exclude`.
pub fn without_folds(manifest: &DatasetManifest, fold_map: &BTreeMap<String, usize>, exclude: &[usize]) -> DatasetManifest {
    DatasetManifest {
        taxonomy_hash: manifest.taxonomy_hash.clone(),
        records: manifest
            .records
            .iter()
            .filter(|r| fold_map.get(&r.id).is_none_or(|f| !exclude.contains(f)))
            .cloned()
            .collect(),
    }
}

pub fn mix_batches(manifest: &DatasetManifest, config: MixConfig, n: usize) -> Result<Vec<BatchPlan>> {
    let sampler = make_sampler(manifest, config)?;
    Ok(sampler.take(n).collect())
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ProportionRow {
    pub id: ClassId,
    pub name: String,
    pub analytic_percent: f64,
    pub empirical_percent: f64,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MixReport {
    pub config: MixConfig,
    pub batches: u64,
    pub images_drawn: u64,
    pub synthetic_image_fraction: f64,
    pub rows: Vec<ProportionRow>,
}

pub fn mix_report(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    taxonomy: &ClassTaxonomy,
    config: MixConfig,
    n_batches: u64,
    jobs: usize,
) -> Result<MixReport> {
    let records: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| matches!(r.source, Source::Synthetic | Source::HandLabelled) && r.review_status != ReviewStatus::Rejected)
        .collect();
    if let Some(r) = records.iter().find(|r| r.mask_path.is_none()) {
        return Err(Error::Usage(format!("record '{}' has no mask", r.id)));
    }
    let counts = pixel_counts(manifest_path, &records, taxonomy, jobs)?;
    let seen = seen_pixel_report(manifest, config, &counts, n_batches)?;
    let rows = seen
        .analytic
        .keys()
        .chain(seen.empirical.keys())
        .copied()
        .collect::<BTreeSet<ClassId>>()
        .into_iter()
        .map(|id| ProportionRow {
            id,
            name: taxonomy.get(id).map(|c| c.name.clone()).unwrap_or_else(|| id.to_string()),
            analytic_percent: 100.0 * seen.analytic.get(&id).copied().unwrap_or(0.0),
            empirical_percent: 100.0 * seen.empirical.get(&id).copied().unwrap_or(0.0),
        })
        .collect();
    Ok(MixReport {
        config,
        batches: n_batches,
        images_drawn: seen.images_drawn,
        synthetic_image_fraction: seen.synthetic_image_fraction,
        rows,
    })
}

/// One line of the prompt plan index.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct PlanIndexEntry {
    pub file: String,
    pub batch: usize,
    pub batch_size: usize,
    pub assignment: AttributeAssignment,
    pub expected_classes: Vec<ClassId>,
}

/// Reads species quotas from a JSON object or a TOML table of name to count.
pub fn read_quotas(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    } else {
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })
    }
}

/// Writes one prompt file per planned image under `out/prompts` plus
/// `out/plan.jsonl`. Returns the index.
pub fn write_prompt_plan(
    out: &Path,
    quotas: &BTreeMap<String, usize>,
    taxonomy: &ClassTaxonomy,
    space: &AttributeSpace,
    bounds: (usize, usize),
    seed: u64,
) -> Result<Vec<PlanIndexEntry>> {
    space.check_taxonomy(taxonomy)?;
    let plan = plan_generation(quotas, taxonomy, space, bounds, seed)?;
    let dir = out.join("prompts");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut index = Vec::new();
    for (b, batch) in plan.batches.iter().enumerate() {
        for (i, a) in batch.assignments.iter().enumerate() {
            let prompt = render_prompt(a, taxonomy)?;
            let file = format!("prompts/b{b:03}_{i:03}.txt");
            let path = out.join(&file);
            std::fs::write(&path, &prompt.text).map_err(|e| Error::io(&path, e))?;
            index.push(PlanIndexEntry {
                file,
                batch: b,
                batch_size: batch.batch_size,
                expected_classes: prompt.expected_classes(),
                assignment: a.clone(),
            });
        }
    }
    io::write_jsonl(&out.join("plan.jsonl"), &index)?;
    Ok(index)
}

/// Zero-shot prompt for every class, or for the classes present in a
/// pseudo-label mask that must then be attached.
pub fn zero_shot(taxonomy: &ClassTaxonomy, from_mask: Option<&Path>) -> Result<ZeroShotPrompt> {
    match from_mask {
        None => Ok(build_zero_shot_prompt(taxonomy, &ClassFilter::Full, false)?),
        Some(path) => {
            let mask = load_mask(path, taxonomy)?;
            let classes: Vec<ClassId> = mask.distinct_classes().into_iter().collect();
            Ok(build_zero_shot_prompt(taxonomy, &ClassFilter::Listed(classes), true)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_mask(path: &Path, w: usize, h: usize, data: Vec<u8>) {
        io::write_id_mask(path, &SemanticMask::new(w, h, data, 255).unwrap()).unwrap();
    }

    #[test]
    fn palette_masks_decode_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let tax = ClassTaxonomy::forest_regeneration();
        let m = SemanticMask::new(2, 2, vec![0, 1, 2, 3], 255).unwrap();
        let raster = regenforge_core::encode_mask(&m, &tax).unwrap();
        let p = dir.path().join("m.png");
        io::write_raster(&p, &raster).unwrap();
        assert_eq!(load_mask(&p, &tax).unwrap(), m);
    }

    #[test]
    fn eval_pools_folds_and_reports_both_matrix_forms() {
        let dir = tempfile::tempdir().unwrap();
        let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
        write_mask(&gt.join("a.png"), 2, 2, vec![0, 0, 1, 1]);
        write_mask(&pred.join("a.png"), 2, 2, vec![0, 0, 1, 0]);
        write_mask(&gt.join("b.png"), 2, 2, vec![1, 1, 1, 255]);
        write_mask(&pred.join("b.png"), 2, 2, vec![1, 1, 255, 1]);
        let tax = ClassTaxonomy::forest_regeneration();
        let folds: BTreeMap<String, usize> = [("a".to_string(), 0), ("b".to_string(), 1)].into();
        let r = eval_dirs(&pred, &gt, &tax, Scoring::default(), Some(&folds)).unwrap();
        assert_eq!(r.n_pairs, 2);
        assert_eq!(r.confusion_counts[0][0], 2);
        assert_eq!(r.confusion_counts[1][0], 1);
        assert_eq!(r.confusion_counts[1][1], 3);
        assert_eq!(r.confusion_rejects[1], 1);
        assert_eq!(r.ignored_pixels, 1);
        assert_eq!(r.folds.len(), 2);
        assert_eq!(r.confusion_row_normalised[1], {
            let mut row = vec![0.0; 24];
            row[0] = 0.2;
            row[1] = 0.6;
            row[23] = 0.2;
            row
        });
        // Pixel accuracy 5 of 7 labelled pixels.
        assert!((r.metrics.pixel_accuracy - 500.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn eval_requires_a_prediction_for_every_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
        write_mask(&gt.join("a.png"), 1, 1, vec![0]);
        std::fs::create_dir_all(&pred).unwrap();
        let err = eval_dirs(&pred, &gt, &ClassTaxonomy::forest_regeneration(), Scoring::default(), None).unwrap_err();
        assert!(err.to_string().contains('a'), "{err}");
    }

    #[test]
    fn quotas_parse_from_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("q.toml");
        std::fs::write(&t, "\"Fir\" = 60\n\"Red Maple\" = 20\n").unwrap();
        let j = dir.path().join("q.json");
        std::fs::write(&j, r#"{"Fir": 60, "Red Maple": 20}"#).unwrap();
        assert_eq!(read_quotas(&t).unwrap(), read_quotas(&j).unwrap());
    }
}
