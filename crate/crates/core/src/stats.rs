//! Structural statistics of masks: class distribution, connected-component
//! instance counts and the mean inverse isoperimetric quotient (mIPQ).
//!
//! Perimeter is the Manhattan perimeter: the number of unit pixel edges
//! separating a class pixel from a pixel of any other label (ignore
//! included) or from the image border. Under this definition a full-frame
//! square scores exactly 4/pi and integer upscaling leaves mIPQ unchanged.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::mask::SemanticMask;
use crate::taxonomy::ClassId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("no masks supplied")]
    NoMasks,
    #[error("masks contain no labelled pixels")]
    NoLabelledPixels,
    #[error("masks disagree on the ignore index")]
    MixedIgnore,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        // Only neighbours already visited in raster order.
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, 0), (-1, -1), (0, -1), (1, -1)],
        }
    }
}

/// Share of non-ignore pixels per class, pooled over all masks.
pub fn class_distribution<'a, I>(masks: I) -> Result<BTreeMap<ClassId, f64>, StatsError>
where
    I: IntoIterator<Item = &'a SemanticMask>,
{
    let mut counts: BTreeMap<ClassId, u64> = BTreeMap::new();
    let mut ignore = None;
    let mut any = false;
    for mask in masks {
        any = true;
        match ignore {
            None => ignore = Some(mask.ignore_index()),
            Some(i) if i != mask.ignore_index() => return Err(StatsError::MixedIgnore),
            _ => {}
        }
        for (id, n) in mask.class_pixel_counts() {
            *counts.entry(id).or_insert(0) += n;
        }
    }
    if !any {
        return Err(StatsError::NoMasks);
    }
    normalise_counts(&counts).ok_or(StatsError::NoLabelledPixels)
}

pub(crate) fn normalise_counts(counts: &BTreeMap<ClassId, u64>) -> Option<BTreeMap<ClassId, f64>> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return None;
    }
    Some(
        counts
            .iter()
            .map(|(&id, &n)| (id, n as f64 / total as f64))
            .collect(),
    )
}

/// Perimeter (boundary edge count) and area per present class.
pub fn perimeter_and_area(mask: &SemanticMask) -> BTreeMap<ClassId, (u64, u64)> {
    let (w, h) = (mask.width(), mask.height());
    let data = mask.data();
    let mut out: BTreeMap<ClassId, (u64, u64)> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = data[y * w + x];
            if mask.is_ignored(id) {
                continue;
            }
            let mut edges = 0u64;
            if x == 0 || data[y * w + x - 1] != id {
                edges += 1;
            }
            if x + 1 == w || data[y * w + x + 1] != id {
                edges += 1;
            }
            if y == 0 || data[(y - 1) * w + x] != id {
                edges += 1;
            }
            if y + 1 == h || data[(y + 1) * w + x] != id {
                edges += 1;
            }
            let entry = out.entry(id).or_insert((0, 0));
            entry.0 += edges;
            entry.1 += 1;
        }
    }
    out
}

/// mIPQ = (1 / 4 pi n) * sum over present classes of L^2 / A.
pub fn mipq(mask: &SemanticMask) -> Result<f64, StatsError> {
    let per_class = perimeter_and_area(mask);
    if per_class.is_empty() {
        return Err(StatsError::NoLabelledPixels);
    }
    let sum: f64 = per_class
        .values()
        .map(|&(l, a)| (l * l) as f64 / a as f64)
        .sum();
    Ok(sum / (4.0 * PI * per_class.len() as f64))
}

/// Connected components per class. Ignore pixels are never counted.
pub fn instance_count(mask: &SemanticMask, connectivity: Connectivity) -> BTreeMap<ClassId, usize> {
    let (w, h) = (mask.width(), mask.height());
    let data = mask.data();
    let mut forest = DisjointSet::new(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let id = data[i];
            if mask.is_ignored(id) {
                continue;
            }
            for &(dx, dy) in connectivity.offsets() {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 || nx as usize >= w {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if data[j] == id {
                    forest.union(i, j);
                }
            }
        }
    }
    let mut counts = BTreeMap::new();
    for (i, &id) in data.iter().enumerate() {
        if !mask.is_ignored(id) && forest.find(i) == i {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    counts
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MaskStats {
    pub per_class_pixels: BTreeMap<ClassId, u64>,
    pub per_class_regions: BTreeMap<ClassId, usize>,
    pub ignored_pixels: u64,
    pub mipq: f64,
    pub n_present_classes: usize,
}

impl MaskStats {
    pub fn total_instances(&self) -> usize {
        self.per_class_regions.values().sum()
    }
}

pub fn mask_stats(mask: &SemanticMask, connectivity: Connectivity) -> Result<MaskStats, StatsError> {
    let per_class_pixels = mask.class_pixel_counts();
    Ok(MaskStats {
        n_present_classes: per_class_pixels.len(),
        mipq: mipq(mask)?,
        per_class_regions: instance_count(mask, connectivity),
        ignored_pixels: mask.ignored_pixels(),
        per_class_pixels,
    })
}

/// Aggregate over a set of masks; standard deviations are population.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DatasetMaskStats {
    pub mean_mipq: f64,
    pub std_mipq: f64,
    pub mean_instances: f64,
    pub std_instances: f64,
    pub n_masks: usize,
}

pub fn dataset_mask_stats<'a, I>(masks: I, connectivity: Connectivity) -> Result<DatasetMaskStats, StatsError>
where
    I: IntoIterator<Item = &'a SemanticMask>,
{
    let mut mipqs = Vec::new();
    let mut instances = Vec::new();
    for mask in masks {
        let stats = mask_stats(mask, connectivity)?;
        mipqs.push(stats.mipq);
        instances.push(stats.total_instances() as f64);
    }
    aggregate_mask_stats(&mipqs, &instances)
}

/// Combines per-mask values computed elsewhere (e.g. in parallel).
pub fn aggregate_mask_stats(mipqs: &[f64], instances: &[f64]) -> Result<DatasetMaskStats, StatsError> {
    let (mean_mipq, std_mipq) = crate::mean_std(mipqs).ok_or(StatsError::NoMasks)?;
    let (mean_instances, std_instances) = crate::mean_std(instances).ok_or(StatsError::NoMasks)?;
    Ok(DatasetMaskStats {
        mean_mipq,
        std_mipq,
        mean_instances,
        std_instances,
        n_masks: mipqs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, data: Vec<u8>) -> SemanticMask {
        SemanticMask::new(w, h, data, 255).unwrap()
    }

    /// Flood fill with an explicit stack, one component at a time.
    fn flood_fill_oracle(m: &SemanticMask, eight: bool) -> BTreeMap<ClassId, usize> {
        let (w, h) = (m.width() as isize, m.height() as isize);
        let mut seen = vec![false; m.len()];
        let mut counts = BTreeMap::new();
        for start in 0..m.len() {
            let id = m.data()[start];
            if seen[start] || id == 255 {
                continue;
            }
            *counts.entry(id).or_insert(0) += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (x, y) = ((p as isize) % w, (p as isize) / w);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let q = (ny * w + nx) as usize;
                        if !seen[q] && m.data()[q] == id {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        counts
    }

    #[test]
    fn single_class_distribution() {
        let m = mask(2, 2, vec![0; 4]);
        let d = class_distribution([&m]).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[&0], 1.0);
    }

    #[test]
    fn two_masks_split_evenly() {
        let a = mask(3, 3, vec![0; 9]);
        let b = mask(3, 3, vec![1; 9]);
        let d = class_distribution([&a, &b]).unwrap();
        assert_eq!(d[&0], 0.5);
        assert_eq!(d[&1], 0.5);
    }

    #[test]
    fn ignore_pixels_are_excluded_from_distribution() {
        let mut data = vec![2u8; 16];
        for v in data.iter_mut().take(4) {
            *v = 255;
        }
        let d = class_distribution([&mask(4, 4, data)]).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[&2], 1.0);
    }

    #[test]
    fn distribution_errors() {
        let none: [&SemanticMask; 0] = [];
        assert_eq!(class_distribution(none), Err(StatsError::NoMasks));
        let all_ignore = mask(2, 2, vec![255; 4]);
        assert_eq!(class_distribution([&all_ignore]), Err(StatsError::NoLabelledPixels));
    }

    #[test]
    fn full_frame_square_is_four_over_pi() {
        for s in [1usize, 2, 7, 64] {
            let m = mask(s, s, vec![3; s * s]);
            assert_eq!(mipq(&m).unwrap(), 4.0 / PI);
        }
    }

    #[test]
    fn all_ignore_mipq_is_an_error() {
        assert_eq!(mipq(&mask(3, 3, vec![255; 9])), Err(StatsError::NoLabelledPixels));
    }

    #[test]
    fn checkerboard_matches_enumeration() {
        // 8x8 alternating two-class board: every pixel is its own region
        // with four boundary edges.
        let data = (0..64).map(|i| ((i % 8 + i / 8) % 2) as u8).collect();
        let m = mask(8, 8, data);
        let mut per_class = [(0u64, 0u64); 2];
        for y in 0..8 {
            for x in 0..8 {
                let id = m.get(x, y) as usize;
                per_class[id].0 += 4;
                per_class[id].1 += 1;
            }
        }
        let expected = per_class
            .iter()
            .map(|&(l, a)| (l * l) as f64 / a as f64)
            .sum::<f64>()
            / (4.0 * PI * 2.0);
        assert_eq!(mipq(&m).unwrap(), expected);
        // 32 px each, 128 edges each: 128^2/32 = 512 per class.
        assert_eq!(expected, 1024.0 / (8.0 * PI));
    }

    #[test]
    fn ignore_neighbours_count_as_boundary() {
        // Class 0 in a 3x1 strip with the middle ignored: two 1-pixel regions.
        let m = mask(3, 1, vec![0, 255, 0]);
        let pa = perimeter_and_area(&m);
        assert_eq!(pa[&0], (8, 2));
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = mask(2, 2, vec![0, 255, 255, 0]);
        assert_eq!(instance_count(&m, Connectivity::Four)[&0], 2);
        assert_eq!(instance_count(&m, Connectivity::Eight)[&0], 1);
    }

    #[test]
    fn solid_region_is_one_instance() {
        let m = mask(5, 4, vec![6; 20]);
        assert_eq!(instance_count(&m, Connectivity::Four)[&6], 1);
    }

    #[test]
    fn dataset_stats_two_point() {
        let a = mask(4, 4, vec![0; 16]);
        let mut data = vec![0u8; 16];
        data[5] = 1;
        let b = mask(4, 4, data);
        let (ma, mb) = (mipq(&a).unwrap(), mipq(&b).unwrap());
        let s = dataset_mask_stats([&a, &b], Connectivity::Four).unwrap();
        assert!((s.mean_mipq - (ma + mb) / 2.0).abs() < 1e-12);
        assert!((s.std_mipq - (ma - mb).abs() / 2.0).abs() < 1e-12);
        assert_eq!(s.mean_instances, 1.5);
        let single = dataset_mask_stats([&a], Connectivity::Four).unwrap();
        assert_eq!(single.std_mipq, 0.0);
        let none: [&SemanticMask; 0] = [];
        assert_eq!(dataset_mask_stats(none, Connectivity::Four), Err(StatsError::NoMasks));
    }

    #[test]
    fn five_mask_fixture_matches_hand_computation() {
        // Hand-computed per-mask mIPQ (4-connectivity, Manhattan perimeter):
        //  m1 2x2 one class:             L=8,  A=4  -> 16/(4pi)
        //  m2 2x1 two classes:           each L=4, A=1 -> (16+16)/(8pi)
        //  m3 3x3 class 0 ring + 1 centre: L0=16 (12 outer+4 inner), A0=8; L1=4, A1=1
        //  m4 4x1 all class 2:           L=10, A=4
        //  m5 1x1 class 0:               L=4,  A=1
        let m1 = mask(2, 2, vec![0; 4]);
        let m2 = mask(2, 1, vec![0, 1]);
        let m3 = mask(3, 3, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]);
        let m4 = mask(4, 1, vec![2; 4]);
        let m5 = mask(1, 1, vec![0]);
        let expected = [
            16.0 / (4.0 * PI),
            32.0 / (8.0 * PI),
            (256.0 / 8.0 + 16.0) / (8.0 * PI),
            25.0 / (4.0 * PI),
            16.0 / (4.0 * PI),
        ];
        let instances = [1.0, 2.0, 2.0, 1.0, 1.0];
        let mean = expected.iter().sum::<f64>() / 5.0;
        let std = libm::sqrt(expected.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0);
        let s = dataset_mask_stats([&m1, &m2, &m3, &m4, &m5], Connectivity::Four).unwrap();
        assert!((s.mean_mipq - mean).abs() < 1e-12);
        assert!((s.std_mipq - std).abs() < 1e-12);
        assert!((s.mean_instances - instances.iter().sum::<f64>() / 5.0).abs() < 1e-12);
        assert_eq!(s.n_masks, 5);
    }

    fn random_mask(w: usize, h: usize, classes: u8, seed: u64) -> SemanticMask {
        let mut state = seed | 1;
        let data = (0..w * h)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % u64::from(classes)) as u8
            })
            .collect();
        mask(w, h, data)
    }

    #[test]
    fn union_find_matches_flood_fill_on_random_masks() {
        for seed in 1..40u64 {
            let m = random_mask(32, 32, 2, seed);
            assert_eq!(instance_count(&m, Connectivity::Four), flood_fill_oracle(&m, false));
            assert_eq!(instance_count(&m, Connectivity::Eight), flood_fill_oracle(&m, true));
        }
    }

    proptest! {
        #[test]
        fn mipq_invariant_under_rotation_translation_and_upscale(
            w in 1usize..10, h in 1usize..10, seed in any::<u64>(), k in 1usize..5,
        ) {
            let m = random_mask(w, h, 3, seed);
            let base = mipq(&m).unwrap();
            prop_assert!(base > 0.0);
            prop_assert_eq!(mipq(&m.rotate90()).unwrap(), base);
            prop_assert_eq!(mipq(&m.upscale(k)).unwrap(), base);
            // Translation within an ignore canvas.
            let (cw, ch) = (w + 3, h + 2);
            let mut shifted = vec![255u8; cw * ch];
            for y in 0..h {
                for x in 0..w {
                    shifted[(y + 1) * cw + x + 2] = m.get(x, y);
                }
            }
            let framed = mask(cw, ch, shifted.clone());
            let mut moved = vec![255u8; cw * ch];
            for y in 0..h {
                for x in 0..w {
                    moved[(y + 2) * cw + x + 3] = m.get(x, y);
                }
            }
            let framed_moved = mask(cw, ch, moved);
            prop_assert_eq!(mipq(&framed).unwrap(), mipq(&framed_moved).unwrap());
        }

        #[test]
        fn four_connectivity_never_counts_fewer(w in 1usize..16, h in 1usize..16, seed in any::<u64>()) {
            let m = random_mask(w, h, 3, seed);
            let four = instance_count(&m, Connectivity::Four);
            let eight = instance_count(&m, Connectivity::Eight);
            for (id, n) in &eight {
                prop_assert!(four[id] >= *n);
            }
        }

        #[test]
        fn distribution_is_order_invariant(seeds in proptest::collection::vec(any::<u64>(), 1..6)) {
            let masks: Vec<_> = seeds.iter().map(|&s| random_mask(5, 4, 4, s)).collect();
            let forward = class_distribution(masks.iter()).unwrap();
            let backward = class_distribution(masks.iter().rev()).unwrap();
            prop_assert_eq!(&forward, &backward);
            let total: f64 = forward.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
