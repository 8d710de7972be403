//! Generation prompts with stochastic attribute sampling, batch planning, and
//! zero-shot segmentation prompts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{ClassDef, ClassId, ClassTaxonomy, Rgb};

/// More co-occurring species than this makes generation unreliable.
pub const MAX_SPECIES_PER_PROMPT: usize = 5;

pub const DEFAULT_BATCH_BOUNDS: (usize, usize) = (50, 100);

/// Base prompt for split-screen photo and mask generation.
pub const GENERATION_TEMPLATE: &str = "### SCENE DESCRIPTION ###
Split-screen image of 4K resolution, 2:1 aspect ratio.
Left side is a photorealistic high-resolution nadir drone photography flying at a very low altitude of 2 meters of a forest regeneration zone taken with a camera with a focal length of 50 mm. The view is strictly top-down, not oblique. The ground cover is typical of a Quebec forest that was <DISTURBANCE_EVENTS>, <DISTURBANCE_YEARS>.
It contains <PLANT_CLASSES>. <GLOBAL_DENSITY_DESCRIPTION>. 
Fine details such as leaf shapes, veins and small branches are clearly visible. The drone flies low enough to resolve individual leaves with high spatial precision.
<OTHER_CLASSES>. <GROUND_TEXTURES>. <PLANT_STRESS>. <LEAF_VARIATION>. <FLOWER_DETAILS>
<SEASON_DESCRIPTION>, <DRYNESS_DESCRIPTION>, <RECENT_RAIN_TIMING>. <LIGHT_DESCRIPTION>

### VISUAL CONSTRAINTS ###
Photorealistic rendering. Natural colors. No artificial patterns. No repetition artifacts. High-frequency details consistent with real vegetation. No stylization.

### SEGMENTATION MASK ###
The right side shows the exact pixel-aligned semantic segmentation mask of the left image. Each pixel belongs to exactly one class. All objects visible in the left image must appear in the mask with no omissions. The mask uses flat solid colours only, with no shading, gradients, transparency or texture. Boundaries between classes are sharp and perfectly defined. This mask is to be used to train a deep neural network for semantic segmentation with <PLANT_CLASSES_MASK_COLORS>, <OTHER_CLASSES_MASK_COLORS>.
";

pub const ZERO_SHOT_HEADER: &str = "Attached is a top view 1024x1024 pixels image taken in a forest regeneration zones in the Quebec province.
Create a semantic segmentation mask of the image, with the following classes. Next to each class is the color of the corresponding mask. Make sure the mask is a square, the same size as the image.
";

pub const ZERO_SHOT_PSEUDO_LABEL_NOTE: &str =
    "A second attached image is a coarse pseudo-label mask of the same scene using the same colours. Use it as a guide for where each class is located.\n";

pub const DEFAULT_ABUNDANCE_PHRASES: [&str; 8] = [
    "distributed patches of",
    "small patches of",
    "several",
    "noticeable patches of",
    "some",
    "mixed clusters of",
    "a few",
    "a large number of",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("attribute '{0}' has no values")]
    EmptyVariable(&'static str),
    #[error("attribute '{0}' has an empty value")]
    EmptyValue(&'static str),
    #[error("species pool is empty")]
    EmptyPool,
    #[error("class '{0}' is not in the taxonomy")]
    UnknownClass(String),
    #[error("class id {0} is not in the taxonomy")]
    UnknownClassId(ClassId),
    #[error("class '{0}' cannot be requested as a generated species")]
    NotASpecies(String),
    #[error("zero-shot class list is empty")]
    EmptyClassList,
    #[error("batch bounds ({0}, {1}) need 1 <= min <= max")]
    InvalidBounds(usize, usize),
    #[error("{0} species requested, at most {MAX_SPECIES_PER_PROMPT} allowed")]
    TooManySpecies(usize),
    #[error("unresolved placeholder {0} in rendered prompt")]
    Unresolved(String),
}

/// One choice for the non-plant ground cover sentence and the classes it
/// introduces into the mask.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct OtherClassesOption {
    pub text: String,
    #[serde(default)]
    pub classes: Vec<String>,
}

/// Value lists for every template variable.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AttributeSpace {
    pub disturbance_event: Vec<String>,
    pub disturbance_years: Vec<String>,
    pub global_density: Vec<String>,
    pub other_classes: Vec<OtherClassesOption>,
    pub ground_textures: Vec<String>,
    pub plant_stress: Vec<String>,
    pub leaf_variation: Vec<String>,
    pub flower_details: Vec<String>,
    pub season: Vec<String>,
    pub dryness: Vec<String>,
    pub recent_rain: Vec<String>,
    pub light: Vec<String>,
    #[serde(default = "default_phrases")]
    pub abundance_phrases: Vec<String>,
}

fn default_phrases() -> Vec<String> {
    DEFAULT_ABUNDANCE_PHRASES.iter().map(|s| s.to_string()).collect()
}

fn strings(values: &[&str]) -> Vec<String> {
    values.iter().map(|s| s.to_string()).collect()
}

impl Default for AttributeSpace {
    fn default() -> Self {
        AttributeSpace {
            disturbance_event: strings(&["Harvested", "Windthrow", "Wildfire", "Insect outbreak"]),
            disturbance_years: strings(&["1 year ago", "2 years ago", "3 years ago", "6 years ago", "10 years ago"]),
            global_density: strings(&[
                "Very dense overlapping vegetation with almost no visible ground",
                "Moderately dense vegetation with some visible gaps.",
                "Sparse vegetation with large patches of visible ground",
            ]),
            other_classes: alloc::vec![
                OtherClassesOption {
                    text: "Moss covers parts of the ground with green to yellow-green tones.".into(),
                    classes: strings(&["Moss"]),
                },
                OtherClassesOption {
                    text: "Boulders and dead wood.".into(),
                    classes: strings(&["Wood", "Boulder"]),
                },
                OtherClassesOption {
                    text: "Boulders are visible.".into(),
                    classes: strings(&["Boulder"]),
                },
                OtherClassesOption {
                    text: "Scattered dead wood lies on the ground.".into(),
                    classes: strings(&["Wood"]),
                },
                OtherClassesOption {
                    text: "Bare soil and leaf litter show between the plants.".into(),
                    classes: Vec::new(),
                },
            ],
            ground_textures: strings(&[
                "Uneven terrain with micro-relief variations",
                "Small depressions filled with organic debris",
                "Irregular wet areas with darker soil.",
            ]),
            plant_stress: strings(&[
                "Slightly wilted leaves",
                "Mixed healthy and stressed plants",
                "Some yellowing foliage",
                "Healthy vigorous foliage",
            ]),
            leaf_variation: strings(&[
                "Some noticeably larger leaves among smaller ones",
                "Overlapping leaves of different sizes",
                "Dense clusters of small leaves.",
            ]),
            flower_details: strings(&["A few small flowers are visible among the vegetation.", "None"]),
            season: strings(&["Early spring", "Late spring", "Mid-summer", "Mid-fall", "Late fall"]),
            dryness: strings(&["Very dry", "Moderately dry", "Moist", "Very wet"]),
            recent_rain: strings(&["No recent rain", "Rain earlier in the day", "Rain has just stopped"]),
            light: strings(&["Very sunny morning light.", "Overcast", "Partially overcast", "Low evening sun"]),
            abundance_phrases: default_phrases(),
        }
    }
}

impl AttributeSpace {
    fn text_variables(&self) -> [(&'static str, &Vec<String>); 12] {
        [
            ("disturbance_event", &self.disturbance_event),
            ("disturbance_years", &self.disturbance_years),
            ("global_density", &self.global_density),
            ("ground_textures", &self.ground_textures),
            ("plant_stress", &self.plant_stress),
            ("leaf_variation", &self.leaf_variation),
            ("flower_details", &self.flower_details),
            ("season", &self.season),
            ("dryness", &self.dryness),
            ("recent_rain", &self.recent_rain),
            ("light", &self.light),
            ("abundance_phrases", &self.abundance_phrases),
        ]
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, values) in self.text_variables() {
            if values.is_empty() {
                return Err(PromptError::EmptyVariable(name));
            }
            if values.iter().any(|v| v.trim().is_empty()) {
                return Err(PromptError::EmptyValue(name));
            }
        }
        if self.other_classes.is_empty() {
            return Err(PromptError::EmptyVariable("other_classes"));
        }
        if self.other_classes.iter().any(|o| o.text.trim().is_empty()) {
            return Err(PromptError::EmptyValue("other_classes"));
        }
        Ok(())
    }

    /// Checks that every class named by an `other_classes` option exists.
    pub fn check_taxonomy(&self, taxonomy: &ClassTaxonomy) -> Result<(), PromptError> {
        for option in &self.other_classes {
            for name in &option.classes {
                taxonomy
                    .by_name(name)
                    .ok_or_else(|| PromptError::UnknownClass(name.clone()))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SpeciesChoice {
    /// Taxonomy class name.
    pub class: String,
    pub abundance: String,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AttributeAssignment {
    pub disturbance_event: String,
    pub disturbance_years: String,
    pub global_density: String,
    pub other_classes: OtherClassesOption,
    pub ground_textures: String,
    pub plant_stress: String,
    pub leaf_variation: String,
    pub flower_details: String,
    pub season: String,
    pub dryness: String,
    pub recent_rain: String,
    pub light: String,
    pub species: Vec<SpeciesChoice>,
    pub rng_seed: u64,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, values: &'a [T]) -> &'a T {
    &values[rng.random_range(0..values.len())]
}

fn sort_species(species: &mut [&ClassDef]) {
    species.sort_by(|a, b| {
        a.prompt_name()
            .to_lowercase()
            .cmp(&b.prompt_name().to_lowercase())
            .then(a.id.cmp(&b.id))
    });
}

fn fill_assignment(space: &AttributeSpace, species: &[&ClassDef], rng: &mut ChaCha8Rng, seed: u64) -> AttributeAssignment {
    let species = species
        .iter()
        .map(|c| SpeciesChoice {
            class: c.name.clone(),
            abundance: pick(rng, &space.abundance_phrases).clone(),
        })
        .collect();
    AttributeAssignment {
        disturbance_event: pick(rng, &space.disturbance_event).clone(),
        disturbance_years: pick(rng, &space.disturbance_years).clone(),
        global_density: pick(rng, &space.global_density).clone(),
        other_classes: pick(rng, &space.other_classes).clone(),
        ground_textures: pick(rng, &space.ground_textures).clone(),
        plant_stress: pick(rng, &space.plant_stress).clone(),
        leaf_variation: pick(rng, &space.leaf_variation).clone(),
        flower_details: pick(rng, &space.flower_details).clone(),
        season: pick(rng, &space.season).clone(),
        dryness: pick(rng, &space.dryness).clone(),
        recent_rain: pick(rng, &space.recent_rain).clone(),
        light: pick(rng, &space.light).clone(),
        species,
        rng_seed: seed,
    }
}

/// Draws a species subset of uniform size in `[1, min(5, pool)]` and one
/// value per variable. Deterministic in `(space, pool, seed)`.
pub fn sample_assignment(space: &AttributeSpace, pool: &[&ClassDef], seed: u64) -> Result<AttributeAssignment, PromptError> {
    space.validate()?;
    if pool.is_empty() {
        return Err(PromptError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = pool.len().min(MAX_SPECIES_PER_PROMPT);
    let k = rng.random_range(1..=max);
    let mut chosen: Vec<&ClassDef> = index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    sort_species(&mut chosen);
    Ok(fill_assignment(space, &chosen, &mut rng, seed))
}

/// Samples attributes for a fixed species subset.
pub fn sample_for_species(space: &AttributeSpace, species: &[&ClassDef], seed: u64) -> Result<AttributeAssignment, PromptError> {
    space.validate()?;
    if species.is_empty() {
        return Err(PromptError::EmptyPool);
    }
    if species.len() > MAX_SPECIES_PER_PROMPT {
        return Err(PromptError::TooManySpecies(species.len()));
    }
    let mut sorted = species.to_vec();
    sort_species(&mut sorted);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(fill_assignment(space, &sorted, &mut rng, seed))
}

/// A colour listed in the mask section of a prompt.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PaletteLine {
    pub label: String,
    pub colour: Rgb,
    pub class_id: ClassId,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub assignment: AttributeAssignment,
    pub palette_fragment: Vec<PaletteLine>,
}

impl PromptText {
    pub fn expected_classes(&self) -> Vec<ClassId> {
        let mut ids: Vec<ClassId> = self.palette_fragment.iter().map(|l| l.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn capitalise(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// "a", "a and b", "a, b, and c".
fn join_list(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        2 => format!("{} and {}", items[0], items[1]),
        n => format!("{}, and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

fn species_phrase(class: &ClassDef) -> String {
    if class.gradient_shades.is_empty() {
        return class.prompt_name().to_string();
    }
    let labels: Vec<String> = class
        .gradient_shades
        .iter()
        .map(|s| s.label.clone().unwrap_or_else(|| class.prompt_name().to_string()))
        .collect();
    format!("{} ({})", class.prompt_name(), labels.join(", "))
}

fn colour_lines(class: &ClassDef) -> Vec<(String, PaletteLine)> {
    if class.gradient_shades.is_empty() {
        let line = PaletteLine {
            label: class.prompt_name().to_string(),
            colour: class.colour,
            class_id: class.id,
        };
        return alloc::vec![(format!("{} : {}", class.prompt_name(), class.colour_word()), line)];
    }
    class
        .gradient_shades
        .iter()
        .map(|s| {
            let label = s.label.clone().unwrap_or_else(|| class.prompt_name().to_string());
            let word = s.colour_name.clone().unwrap_or_else(|| format!("{}", s.colour));
            (
                format!("{label} : {word}"),
                PaletteLine {
                    label,
                    colour: s.colour,
                    class_id: class.id,
                },
            )
        })
        .collect()
}

/// Replaces `<NAME>` tokens. A value's trailing period is dropped when the
/// template already follows the token with one.
fn substitute(template: &str, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 512);
    let mut rest = template;
    while let Some(start) = rest.find('<') {
        out.push_str(&rest[..start]);
        let after = &rest[start..];
        let end = after.find('>').ok_or_else(|| PromptError::Unresolved(after.into()))?;
        let name = &after[1..end];
        let value = values
            .get(name)
            .ok_or_else(|| PromptError::Unresolved(format!("<{name}>")))?;
        rest = &after[end + 1..];
        let value = if rest.starts_with('.') {
            value.trim_end().trim_end_matches('.')
        } else {
            value.as_str()
        };
        out.push_str(value);
    }
    out.push_str(rest);
    Ok(out)
}

/// Fills the generation template from an assignment.
pub fn render_prompt(assignment: &AttributeAssignment, taxonomy: &ClassTaxonomy) -> Result<PromptText, PromptError> {
    if assignment.species.len() > MAX_SPECIES_PER_PROMPT {
        return Err(PromptError::TooManySpecies(assignment.species.len()));
    }
    let require = |name: &str| taxonomy.by_name(name).ok_or_else(|| PromptError::UnknownClass(name.into()));
    let mut palette = Vec::new();
    let mut plant_items = Vec::new();
    let mut plant_colours = Vec::new();
    for choice in &assignment.species {
        let class = require(&choice.class)?;
        plant_items.push(format!("{} {}", choice.abundance, species_phrase(class)));
        for (text, line) in colour_lines(class) {
            plant_colours.push(text);
            palette.push(line);
        }
    }
    let mut other_colours = Vec::new();
    for name in &assignment.other_classes.classes {
        for (text, line) in colour_lines(require(name)?) {
            other_colours.push(text);
            palette.push(line);
        }
    }

    let mut template = String::from(GENERATION_TEMPLATE);
    if other_colours.is_empty() {
        template = template.replace("<PLANT_CLASSES_MASK_COLORS>, <OTHER_CLASSES_MASK_COLORS>", "<PLANT_CLASSES_MASK_COLORS>");
    }
    let a = assignment;
    let values: BTreeMap<&str, String> = [
        ("DISTURBANCE_EVENTS", a.disturbance_event.clone()),
        ("DISTURBANCE_YEARS", a.disturbance_years.clone()),
        ("PLANT_CLASSES", capitalise(&join_list(&plant_items))),
        ("GLOBAL_DENSITY_DESCRIPTION", a.global_density.clone()),
        ("OTHER_CLASSES", a.other_classes.text.clone()),
        ("GROUND_TEXTURES", a.ground_textures.clone()),
        ("PLANT_STRESS", a.plant_stress.clone()),
        ("LEAF_VARIATION", a.leaf_variation.clone()),
        ("FLOWER_DETAILS", a.flower_details.clone()),
        ("SEASON_DESCRIPTION", a.season.clone()),
        ("DRYNESS_DESCRIPTION", a.dryness.clone()),
        ("RECENT_RAIN_TIMING", a.recent_rain.clone()),
        ("LIGHT_DESCRIPTION", a.light.clone()),
        ("PLANT_CLASSES_MASK_COLORS", plant_colours.join(", ")),
        ("OTHER_CLASSES_MASK_COLORS", other_colours.join(", ")),
    ]
    .into_iter()
    .collect();
    let text = substitute(&template, &values)?;
    Ok(PromptText {
        text,
        assignment: assignment.clone(),
        palette_fragment: palette,
    })
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GenerationBatch {
    /// Taxonomy class names, fixed for every prompt in the batch.
    pub species: Vec<String>,
    pub batch_size: usize,
    pub assignments: Vec<AttributeAssignment>,
}

#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub seed: u64,
    pub batches: Vec<GenerationBatch>,
}

impl GenerationPlan {
    pub fn total_images(&self) -> usize {
        self.batches.iter().map(|b| b.batch_size).sum()
    }

    /// Planned appearances per class id.
    pub fn appearances(&self, taxonomy: &ClassTaxonomy) -> BTreeMap<ClassId, usize> {
        let mut out = BTreeMap::new();
        for batch in &self.batches {
            for name in &batch.species {
                if let Some(c) = taxonomy.by_name(name) {
                    *out.entry(c.id).or_insert(0) += batch.batch_size;
                }
            }
        }
        out
    }
}

/// Greedy batch planner.
///
/// Each batch takes up to five classes with the largest remaining quota
/// (ties by id) as its fixed subset. The batch size is the largest remaining
/// quota in the subset clamped to `bounds`, and every member's quota drops by
/// that size. Repeats until every quota is met.
pub fn plan_generation(
    quotas: &BTreeMap<String, usize>,
    taxonomy: &ClassTaxonomy,
    space: &AttributeSpace,
    bounds: (usize, usize),
    seed: u64,
) -> Result<GenerationPlan, PromptError> {
    let (lo, hi) = bounds;
    if lo == 0 || lo > hi {
        return Err(PromptError::InvalidBounds(lo, hi));
    }
    space.validate()?;
    let pool: Vec<ClassId> = taxonomy.generation_species_pool().iter().map(|c| c.id).collect();
    let mut remaining: BTreeMap<ClassId, usize> = BTreeMap::new();
    for (name, &quota) in quotas {
        let class = taxonomy.by_name(name).ok_or_else(|| PromptError::UnknownClass(name.clone()))?;
        if !pool.contains(&class.id) {
            return Err(PromptError::NotASpecies(name.clone()));
        }
        if quota > 0 {
            *remaining.entry(class.id).or_insert(0) += quota;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    loop {
        let mut open: Vec<(ClassId, usize)> = remaining.iter().filter(|(_, &q)| q > 0).map(|(&c, &q)| (c, q)).collect();
        if open.is_empty() {
            break;
        }
        open.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        open.truncate(MAX_SPECIES_PER_PROMPT);
        let size = open[0].1.clamp(lo, hi);
        let classes: Vec<&ClassDef> = open
            .iter()
            .map(|&(id, _)| taxonomy.get(id).ok_or(PromptError::UnknownClassId(id)))
            .collect::<Result<_, _>>()?;
        let mut assignments = Vec::with_capacity(size);
        for _ in 0..size {
            let s: u64 = rng.random();
            assignments.push(sample_for_species(space, &classes, s)?);
        }
        let species = assignments[0].species.iter().map(|c| c.class.clone()).collect();
        for &(id, _) in &open {
            if let Some(q) = remaining.get_mut(&id) {
                *q = q.saturating_sub(size);
            }
        }
        batches.push(GenerationBatch {
            species,
            batch_size: size,
            assignments,
        });
    }
    Ok(GenerationPlan { seed, batches })
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassFilter {
    Full,
    Listed(Vec<ClassId>),
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ZeroShotPrompt {
    pub text: String,
    pub classes: Vec<ClassId>,
    /// The caller must attach the pseudo-label mask image with the prompt.
    pub attach_pseudo_label: bool,
}

/// Zero-shot segmentation prompt listing `Name: (r, g, b)` per class, in
/// taxonomy order.
pub fn build_zero_shot_prompt(
    taxonomy: &ClassTaxonomy,
    filter: &ClassFilter,
    attach_pseudo_label: bool,
) -> Result<ZeroShotPrompt, PromptError> {
    let classes: Vec<&ClassDef> = match filter {
        ClassFilter::Full => taxonomy.classes().iter().collect(),
        ClassFilter::Listed(ids) => {
            if ids.is_empty() {
                return Err(PromptError::EmptyClassList);
            }
            for &id in ids {
                if !taxonomy.contains_id(id) {
                    return Err(PromptError::UnknownClassId(id));
                }
            }
            taxonomy.classes().iter().filter(|c| ids.contains(&c.id)).collect()
        }
    };
    let mut text = String::from(ZERO_SHOT_HEADER);
    if attach_pseudo_label {
        text.push_str(ZERO_SHOT_PSEUDO_LABEL_NOTE);
    }
    let lines: Vec<String> = classes.iter().map(|c| format!("{}: {}", c.name, c.colour)).collect();
    text.push_str(&lines.join("\n"));
    text.push('\n');
    Ok(ZeroShotPrompt {
        text,
        classes: classes.iter().map(|c| c.id).collect(),
        attach_pseudo_label,
    })
}
