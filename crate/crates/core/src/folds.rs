//! Spatially separated cross-validation folds.
//!
//! Sites closer than the separation distance are merged by single linkage, so
//! any two sites in different clusters (and therefore different folds) are at
//! least that far apart. Clusters are then placed greedily for class balance.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::taxonomy::ClassId;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FoldError {
    #[error("coordinate ({lat}, {lon}) is outside WGS-84 range")]
    OutOfRange { lat: f64, lon: f64 },
    #[error("separation must be positive, got {0} km")]
    InvalidSeparation(f64),
    #[error("fold count must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("{clusters} spatial clusters cannot fill {k} folds; lower k to at most {clusters}")]
    NotEnoughClusters { clusters: usize, k: usize },
    #[error("no sites given")]
    NoSites,
    #[error("duplicate site id '{0}'")]
    DuplicateSite(String),
    #[error("site '{0}' has no fold")]
    UnassignedSite(String),
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, FoldError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(FoldError::OutOfRange { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub point: GeoPoint,
}

impl Site {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Result<Self, FoldError> {
        Ok(Site {
            id: id.into(),
            point: GeoPoint::new(lat, lon)?,
        })
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let to_rad = core::f64::consts::PI / 180.0;
    let (phi1, phi2) = (a.lat * to_rad, b.lat * to_rad);
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon) * to_rad;
    let s1 = libm::sin(dphi / 2.0);
    let s2 = libm::sin(dlambda / 2.0);
    let h = s1 * s1 + libm::cos(phi1) * libm::cos(phi2) * s2 * s2;
    2.0 * EARTH_RADIUS_KM * libm::asin(libm::sqrt(h.clamp(0.0, 1.0)))
}

/// Checked variant taking raw degrees.
pub fn haversine_deg(a: (f64, f64), b: (f64, f64)) -> Result<f64, FoldError> {
    Ok(haversine_km(GeoPoint::new(a.0, a.1)?, GeoPoint::new(b.0, b.1)?))
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SiteCluster {
    pub id: usize,
    pub site_ids: Vec<String>,
    pub centroid: GeoPoint,
    /// Class pixel totals summed over member sites.
    pub class_totals: BTreeMap<ClassId, u64>,
}

impl SiteCluster {
    pub fn total_pixels(&self) -> u64 {
        self.class_totals.values().sum()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Single-linkage clusters at `separation_km`. Cluster order follows the first
/// appearance of a member in `sites`; members keep input order.
pub fn cluster_sites(sites: &[Site], separation_km: f64) -> Result<Vec<SiteCluster>, FoldError> {
    if sites.is_empty() {
        return Err(FoldError::NoSites);
    }
    if separation_km.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) || !separation_km.is_finite() {
        return Err(FoldError::InvalidSeparation(separation_km));
    }
    let mut seen = BTreeMap::new();
    for site in sites {
        if seen.insert(site.id.as_str(), ()).is_some() {
            return Err(FoldError::DuplicateSite(site.id.clone()));
        }
    }
    let n = sites.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if haversine_km(sites[i].point, sites[j].point) < separation_km {
                union(&mut parent, i, j);
            }
        }
    }
    let mut slot_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let slot = *slot_of_root.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(i);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(id, idx)| {
            let count = idx.len() as f64;
            let lat = idx.iter().map(|&i| sites[i].point.lat).sum::<f64>() / count;
            let lon = idx.iter().map(|&i| sites[i].point.lon).sum::<f64>() / count;
            SiteCluster {
                id,
                site_ids: idx.iter().map(|&i| sites[i].id.clone()).collect(),
                centroid: GeoPoint { lat, lon },
                class_totals: BTreeMap::new(),
            }
        })
        .collect())
}

/// Sums per-site class totals into their clusters.
pub fn attach_class_totals(clusters: &mut [SiteCluster], per_site: &BTreeMap<String, BTreeMap<ClassId, u64>>) {
    for cluster in clusters {
        cluster.class_totals.clear();
        for site in &cluster.site_ids {
            if let Some(totals) = per_site.get(site) {
                for (&class, &count) in totals {
                    *cluster.class_totals.entry(class).or_insert(0) += count;
                }
            }
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold index per cluster id.
    pub cluster_fold: BTreeMap<usize, usize>,
    /// Fold index per site id.
    pub site_fold: BTreeMap<String, usize>,
    pub fold_totals: Vec<BTreeMap<ClassId, u64>>,
}

impl FoldAssignment {
    pub fn fold_of(&self, site_id: &str) -> Option<usize> {
        self.site_fold.get(site_id).copied()
    }

    pub fn fold_loads(&self) -> Vec<u64> {
        self.fold_totals.iter().map(|t| t.values().sum()).collect()
    }

    pub fn clusters_per_fold(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &fold in self.cluster_fold.values() {
            counts[fold] += 1;
        }
        counts
    }
}

/// Greedy placement, largest cluster first.
///
/// Each cluster goes to the fold that minimises, after placement, the largest
/// share any fold holds of any class's global pixels. Ties are broken by the
/// receiving fold's own largest share, then its cluster count, then its index.
/// Shares are compared as exact rationals.
pub fn assign_folds(clusters: &[SiteCluster], k: usize) -> Result<FoldAssignment, FoldError> {
    if k < 2 {
        return Err(FoldError::TooFewFolds(k));
    }
    if clusters.len() < k {
        return Err(FoldError::NotEnoughClusters {
            clusters: clusters.len(),
            k,
        });
    }
    let mut global: BTreeMap<ClassId, u64> = BTreeMap::new();
    for c in clusters {
        for (&class, &count) in &c.class_totals {
            *global.entry(class).or_insert(0) += count;
        }
    }
    let classes: Vec<(ClassId, u64)> = global.into_iter().filter(|&(_, n)| n > 0).collect();

    let mut order: Vec<&SiteCluster> = clusters.iter().collect();
    order.sort_by(|a, b| b.total_pixels().cmp(&a.total_pixels()).then(a.id.cmp(&b.id)));

    let mut fold_totals: Vec<BTreeMap<ClassId, u64>> = vec![BTreeMap::new(); k];
    let mut fold_clusters = vec![0usize; k];
    let mut cluster_fold = BTreeMap::new();

    // Largest share of a class's global total held by one fold, as a fraction.
    let max_share = |totals: &BTreeMap<ClassId, u64>| -> Share {
        classes
            .iter()
            .map(|&(class, global)| Share {
                num: totals.get(&class).copied().unwrap_or(0),
                den: global,
            })
            .max()
            .unwrap_or(Share { num: 0, den: 1 })
    };

    for cluster in order {
        let mut best: Option<(Share, Share, usize, usize)> = None;
        for fold in 0..k {
            let mut candidate = fold_totals[fold].clone();
            for (&class, &count) in &cluster.class_totals {
                *candidate.entry(class).or_insert(0) += count;
            }
            let own = max_share(&candidate);
            let overall = (0..k)
                .map(|f| if f == fold { own } else { max_share(&fold_totals[f]) })
                .max()
                .unwrap_or(own);
            let key = (overall, own, fold_clusters[fold], fold);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        let fold = best.map(|b| b.3).unwrap_or(0);
        for (&class, &count) in &cluster.class_totals {
            *fold_totals[fold].entry(class).or_insert(0) += count;
        }
        fold_clusters[fold] += 1;
        cluster_fold.insert(cluster.id, fold);
    }

    // Guarantee non-empty folds: move singletons out of the most crowded fold
    // into any empty one. Only reachable when many clusters carry no pixels.
    for empty in 0..k {
        if fold_clusters[empty] > 0 {
            continue;
        }
        let donor = (0..k).max_by_key(|&f| (fold_clusters[f], core::cmp::Reverse(f))).unwrap_or(0);
        let moved = clusters
            .iter()
            .filter(|c| cluster_fold.get(&c.id) == Some(&donor))
            .min_by_key(|c| (c.total_pixels(), c.id))
            .map(|c| c.id);
        if let Some(id) = moved {
            let cluster = clusters.iter().find(|c| c.id == id).unwrap_or(&clusters[0]);
            for (&class, &count) in &cluster.class_totals {
                if let Some(v) = fold_totals[donor].get_mut(&class) {
                    *v -= count;
                }
                *fold_totals[empty].entry(class).or_insert(0) += count;
            }
            fold_clusters[donor] -= 1;
            fold_clusters[empty] += 1;
            cluster_fold.insert(id, empty);
        }
    }

    let mut site_fold = BTreeMap::new();
    for c in clusters {
        for s in &c.site_ids {
            site_fold.insert(s.clone(), cluster_fold[&c.id]);
        }
    }
    Ok(FoldAssignment {
        k,
        cluster_fold,
        site_fold,
        fold_totals,
    })
}

/// Non-negative fraction compared by cross-multiplication.
#[derive(Clone, Copy, Debug)]
struct Share {
    num: u64,
    den: u64,
}

impl PartialEq for Share {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == core::cmp::Ordering::Equal
    }
}

impl Eq for Share {}

impl PartialOrd for Share {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Share {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (u128::from(self.num) * u128::from(other.den)).cmp(&(u128::from(other.num) * u128::from(self.den)))
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SitePairViolation {
    pub a: String,
    pub b: String,
    pub fold_a: usize,
    pub fold_b: usize,
    pub distance_km: f64,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub separation_km: f64,
    /// `None` when every site sits in one fold.
    pub min_cross_fold_km: Option<f64>,
    pub violations: Vec<SitePairViolation>,
    pub fold_class_totals: Vec<BTreeMap<ClassId, u64>>,
}

/// Checks every cross-fold site pair against the separation distance.
pub fn verify_assignment(
    assignment: &FoldAssignment,
    sites: &[Site],
    separation_km: f64,
) -> Result<VerifyReport, FoldError> {
    let mut folds = Vec::with_capacity(sites.len());
    for site in sites {
        folds.push(
            assignment
                .fold_of(&site.id)
                .ok_or_else(|| FoldError::UnassignedSite(site.id.clone()))?,
        );
    }
    let mut min_cross: Option<f64> = None;
    let mut violations = Vec::new();
    for i in 0..sites.len() {
        for j in i + 1..sites.len() {
            if folds[i] == folds[j] {
                continue;
            }
            let d = haversine_km(sites[i].point, sites[j].point);
            min_cross = Some(min_cross.map_or(d, |m: f64| m.min(d)));
            if d < separation_km {
                violations.push(SitePairViolation {
                    a: sites[i].id.clone(),
                    b: sites[j].id.clone(),
                    fold_a: folds[i],
                    fold_b: folds[j],
                    distance_km: d,
                });
            }
        }
    }
    Ok(VerifyReport {
        passed: violations.is_empty(),
        separation_km,
        min_cross_fold_km: min_cross,
        violations,
        fold_class_totals: assignment.fold_totals.clone(),
    })
}

/// Keeps only candidates at least `separation_km` from every reference site.
/// Used to drop pseudo-labelled imagery near validation and test sites.
pub fn exclude_near<'a, T>(
    candidates: &'a [T],
    location: impl Fn(&T) -> Option<GeoPoint>,
    reference: &[GeoPoint],
    separation_km: f64,
) -> Vec<&'a T> {
    candidates
        .iter()
        .filter(|c| match location(c) {
            Some(p) => reference.iter().all(|&r| haversine_km(p, r) >= separation_km),
            None => true,
        })
        .collect()
}
