//! Miniature split-screen corpus with one or more canvases per defect
//! category. Each canvas is drawn from a region layout so the photo half and
//! the mask half share exact geometry unless a defect is being staged.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use regenforge_core::pair::{Corner, Verdict, WatermarkPolicy, WatermarkSpec};
use regenforge_core::taxonomy::{ClassId, ClassTaxonomy, Rgb};
use regenforge_core::{DefectTag, RgbRaster};

use crate::error::Result;
use crate::io;

pub const HALF_WIDTH: usize = 96;
pub const HEIGHT: usize = 64;

/// Extraction runs over the corpus look for a stamp in this box.
pub const FIXTURE_WATERMARK: WatermarkSpec = WatermarkSpec {
    corner: Corner::BottomRight,
    width: 24,
    height: 12,
};

pub fn fixture_watermark_policy() -> WatermarkPolicy {
    WatermarkPolicy::Detect(FIXTURE_WATERMARK)
}

/// Designed outcome for one canvas.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Expected {
    pub file: String,
    /// The defect the canvas stages, if any.
    pub defect: Option<DefectTag>,
    pub verdict: Verdict,
    /// Tag automated QA must attach. `None` for clean canvases and for
    /// defects only a reviewer can see.
    pub auto_tag: Option<DefectTag>,
    /// Tag a reviewer is expected to attach.
    pub review_tag: Option<DefectTag>,
}

pub struct Fixture {
    pub raw: RgbRaster,
    pub expected: Expected,
}

#[derive(Clone, Copy)]
struct Region {
    /// Mask colour is taken from this class (shade index when set).
    class: &'static str,
    shade: Option<usize>,
    photo: [u8; 3],
}

const MOSS: Region = Region {
    class: "Moss",
    shade: None,
    photo: [140, 150, 80],
};
const FIR: Region = Region {
    class: "Fir",
    shade: None,
    photo: [46, 74, 40],
};
const BOULDER: Region = Region {
    class: "Boulder",
    shade: None,
    photo: [200, 198, 190],
};
const WOOD: Region = Region {
    class: "Wood",
    shade: None,
    photo: [96, 70, 50],
};
const BERRY: [Region; 3] = [
    Region {
        class: "Lowbush Blueberry",
        shade: Some(0),
        photo: [40, 60, 90],
    },
    Region {
        class: "Lowbush Blueberry",
        shade: Some(1),
        photo: [50, 70, 100],
    },
    Region {
        class: "Lowbush Blueberry",
        shade: Some(2),
        photo: [60, 80, 110],
    },
];
const FLOWER: [u8; 3] = [230, 225, 60];
const STAMP: Rgb = Rgb([250, 250, 250]);
const WHITE: Rgb = Rgb([255, 255, 255]);

fn meadow(x: f64, y: f64) -> Region {
    let (dx, dy) = (x - 56.0, y - 34.0);
    if dx * dx + dy * dy <= 13.0 * 13.0 {
        FIR
    } else if (76.0..92.0).contains(&x) && (8.0..26.0).contains(&y) {
        BOULDER
    } else {
        MOSS
    }
}

fn blueberry(x: f64, y: f64) -> Region {
    if (10.0..50.0).contains(&x) && (10.0..54.0).contains(&y) {
        BERRY[((y - 10.0) / 15.0) as usize]
    } else if (62.0..86.0).contains(&x) && (20.0..44.0).contains(&y) {
        WOOD
    } else {
        MOSS
    }
}

fn mask_colour(tax: &ClassTaxonomy, r: Region) -> Rgb {
    let class = tax.by_name(r.class).expect("fixture class exists");
    match r.shade {
        Some(i) => class.gradient_shades[i].colour,
        None => class.colour,
    }
}

fn photo_from(w: usize, h: usize, seed: u64, layout: impl Fn(f64, f64) -> [u8; 3]) -> RgbRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let base = layout(x as f64, y as f64);
            let j: i16 = rng.random_range(-3..=3);
            pixels.push(Rgb(base.map(|v| (i16::from(v) + j).clamp(0, 255) as u8)));
        }
    }
    RgbRaster::new(w, h, pixels).expect("non-empty")
}

fn mask_from(tax: &ClassTaxonomy, w: usize, h: usize, layout: impl Fn(f64, f64) -> Region) -> RgbRaster {
    let pixels = (0..w * h)
        .map(|i| mask_colour(tax, layout((i % w) as f64, (i / w) as f64)))
        .collect();
    RgbRaster::new(w, h, pixels).expect("non-empty")
}

fn canvas(photo: &RgbRaster, mask: &RgbRaster) -> RgbRaster {
    photo.hconcat(mask).expect("equal heights")
}

fn expected(file: &str, defect: Option<DefectTag>, verdict: Verdict, auto: Option<DefectTag>, review: Option<DefectTag>) -> Expected {
    Expected {
        file: format!("{file}.png"),
        defect,
        verdict,
        auto_tag: auto,
        review_tag: review,
    }
}

/// Builds the corpus. Deterministic.
pub fn corpus() -> Vec<Fixture> {
    let tax = ClassTaxonomy::forest_regeneration_generation();
    let (w, h) = (HALF_WIDTH, HEIGHT);
    let meadow_photo = |seed| photo_from(w, h, seed, |x, y| meadow(x, y).photo);
    let meadow_mask = || mask_from(&tax, w, h, meadow);
    let mut out = Vec::new();
    let mut push = |raw: RgbRaster, e: Expected| out.push(Fixture { raw, expected: e });

    push(
        canvas(&meadow_photo(1), &meadow_mask()),
        expected("01_clean_meadow", None, Verdict::AutoPass, None, None),
    );

    push(
        canvas(&photo_from(w, h, 2, |x, y| blueberry(x, y).photo), &mask_from(&tax, w, h, blueberry)),
        expected("02_clean_blueberry_shades", None, Verdict::AutoPass, None, None),
    );

    // Photo half one column wider than the mask half.
    let wide = photo_from(w + 1, h, 3, |x, y| meadow((x - 1.0).max(0.0), y).photo);
    push(
        canvas(&wide, &meadow_mask()),
        expected("03_clean_odd_width", None, Verdict::AutoPass, None, None),
    );

    // Seam two columns right of centre: both outer photo columns are spare.
    let inner = w - 1;
    let drift_photo = photo_from(inner + 2, h, 4, |x, y| meadow((x - 1.0).clamp(0.0, inner as f64 - 1.0), y).photo);
    push(
        canvas(&drift_photo, &mask_from(&tax, inner, h, meadow)),
        expected("04_clean_seam_drift", None, Verdict::AutoPass, None, None),
    );

    // 30% of the photo painted in the moss mask colour.
    let green = mask_colour(&tax, MOSS).0;
    let leak = photo_from(w, h, 5, |x, y| if x < 29.0 { green } else { meadow(x, y).photo });
    push(
        canvas(&leak, &meadow_mask()),
        expected(
            "05_palette_leak",
            Some(DefectTag::PaletteLeakInPhoto),
            Verdict::NeedsReview,
            Some(DefectTag::PaletteLeakInPhoto),
            None,
        ),
    );

    // Half of the mask left unpainted.
    let mut missing = meadow_mask();
    for y in 0..h {
        for x in 24..72 {
            missing.set(x, y, WHITE);
        }
    }
    push(
        canvas(&meadow_photo(6), &missing),
        expected(
            "06_missing_mask",
            Some(DefectTag::MissingMask),
            Verdict::AutoReject,
            Some(DefectTag::MissingMask),
            None,
        ),
    );

    // Mask content 12 rows shorter, letterboxed in white.
    let mut short = meadow_mask();
    for y in h - 12..h {
        for x in 0..w {
            short.set(x, y, WHITE);
        }
    }
    push(
        canvas(&meadow_photo(7), &short),
        expected(
            "07_size_mismatch",
            Some(DefectTag::SizeMismatch),
            Verdict::AutoReject,
            Some(DefectTag::SizeMismatch),
            None,
        ),
    );

    // Mask geometry shifted 8 px right of the photo.
    push(
        canvas(&meadow_photo(8), &mask_from(&tax, w, h, |x, y| meadow(x - 8.0, y))),
        expected(
            "08_misalignment",
            Some(DefectTag::Misalignment),
            Verdict::NeedsReview,
            Some(DefectTag::Misalignment),
            None,
        ),
    );

    // Generator stamp in the bottom-right corner of the canvas.
    let mut stamped = meadow_mask();
    for y in h - 8..h - 3 {
        for x in w - 16..w - 4 {
            if (x + y) % 2 == 0 || y == h - 6 {
                stamped.set(x, y, STAMP);
            }
        }
    }
    push(
        canvas(&meadow_photo(9), &stamped),
        expected(
            "09_watermark",
            Some(DefectTag::Watermark),
            Verdict::AutoPass,
            Some(DefectTag::Watermark),
            None,
        ),
    );

    // A flower patch in the photo that the mask does not explain.
    let halluc = photo_from(w, h, 10, |x, y| {
        let (dx, dy) = (x - 20.0, y - 46.0);
        if dx * dx + dy * dy <= 25.0 {
            FLOWER
        } else {
            meadow(x, y).photo
        }
    });
    push(
        canvas(&halluc, &meadow_mask()),
        expected(
            "10_hallucination",
            Some(DefectTag::Hallucination),
            Verdict::AutoPass,
            None,
            Some(DefectTag::Hallucination),
        ),
    );

    // Correct geometry, swapped classes.
    let swapped = mask_from(&tax, w, h, |x, y| {
        let r = meadow(x, y);
        match r.class {
            "Fir" => BOULDER,
            "Boulder" => FIR,
            _ => r,
        }
    });
    push(
        canvas(&meadow_photo(11), &swapped),
        expected(
            "11_wrong_semantics",
            Some(DefectTag::WrongSemantics),
            Verdict::AutoPass,
            None,
            Some(DefectTag::WrongSemantics),
        ),
    );

    // Oblique photo: the scene is stretched towards the top edge while the
    // mask stays top-down.
    let oblique = photo_from(w, h, 12, |x, y| {
        let k = 1.0 + 0.5 * (1.0 - y / h as f64);
        let cx = w as f64 / 2.0;
        meadow(cx + (x - cx) / k, y * 0.8).photo
    });
    push(
        canvas(&oblique, &meadow_mask()),
        expected(
            "12_wrong_viewpoint",
            Some(DefectTag::WrongViewpoint),
            Verdict::NeedsReview,
            Some(DefectTag::Misalignment),
            Some(DefectTag::WrongViewpoint),
        ),
    );

    // No mask half at all: one continuous photo across the canvas.
    let wide_scene = photo_from(2 * w, h, 13, |x, y| meadow(x / 2.0, y).photo);
    push(
        wide_scene,
        expected(
            "13_no_seam",
            Some(DefectTag::SizeMismatch),
            Verdict::AutoReject,
            Some(DefectTag::SizeMismatch),
            None,
        ),
    );

    out
}

/// Writes every canvas as PNG plus `expected.jsonl`.
pub fn write_corpus(dir: &Path) -> Result<Vec<Expected>> {
    let fixtures = corpus();
    for f in &fixtures {
        io::write_raster(&dir.join(&f.expected.file), &f.raw)?;
    }
    let expected: Vec<Expected> = fixtures.into_iter().map(|f| f.expected).collect();
    io::write_jsonl(&dir.join("expected.jsonl"), &expected)?;
    Ok(expected)
}

/// Class ids the clean meadow canvas decodes to.
pub fn meadow_classes() -> Vec<ClassId> {
    let tax = ClassTaxonomy::forest_regeneration_generation();
    let mut ids: Vec<ClassId> = ["Moss", "Fir", "Boulder"]
        .iter()
        .map(|n| tax.by_name(n).expect("builtin").id)
        .collect();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use regenforge_core::pair::{extract, QaThresholds, SeamParams};

    #[test]
    fn automated_qa_matches_designed_outcomes() {
        let tax = ClassTaxonomy::forest_regeneration_generation();
        let t = QaThresholds::default();
        let mut failures = Vec::new();
        for f in corpus() {
            let ex = extract(&f.raw, &tax, &t, &SeamParams::default(), &fixture_watermark_policy()).unwrap();
            let r = &ex.report;
            let e = &f.expected;
            let tag_ok = match e.auto_tag {
                Some(tag) => r.tags.contains(&tag),
                None => r.tags.is_empty(),
            };
            println!(
                "{} verdict={:?} tags={:?} leak={:.4} unmapped={:.4} mis={:.3} seam={:?} err={:?}",
                e.file, r.verdict, r.tags, r.palette_leakage_fraction, r.unmapped_fraction, r.misalignment_score, r.seam_column, r.error
            );
            if r.verdict != e.verdict || !tag_ok {
                failures.push(e.file.clone());
            }
        }
        assert!(failures.is_empty(), "{failures:?}");
    }

    #[test]
    fn corpus_is_deterministic() {
        let a: Vec<_> = corpus().into_iter().map(|f| f.raw).collect();
        let b: Vec<_> = corpus().into_iter().map(|f| f.raw).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn every_defect_category_is_staged() {
        let staged: Vec<DefectTag> = corpus().iter().filter_map(|f| f.expected.defect).collect();
        for tag in DefectTag::ALL {
            assert!(staged.contains(&tag), "{tag:?}");
        }
    }

    fn shipped_dir() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pairs")
    }

    #[test]
    fn shipped_corpus_matches_generator() {
        let dir = shipped_dir();
        if std::env::var_os("REGENFORGE_BLESS").is_some() {
            write_corpus(&dir).unwrap();
        }
        let expected: Vec<Expected> = io::read_jsonl(&dir.join("expected.jsonl")).unwrap();
        let fixtures = corpus();
        assert_eq!(expected, fixtures.iter().map(|f| f.expected.clone()).collect::<Vec<_>>());
        for f in &fixtures {
            let shipped = io::read_raster(&dir.join(&f.expected.file)).unwrap();
            assert_eq!(shipped, f.raw, "{} differs from the generator", f.expected.file);
        }
    }
}
