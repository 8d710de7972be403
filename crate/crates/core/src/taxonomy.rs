//! Class schema and mask palette.
//!
//! A [`ClassTaxonomy`] is the contract every mask in the toolkit is written
//! against: class ids are contiguous from zero, every class owns one primary
//! colour, and a class may additionally own a list of gradient shades that
//! all decode to the same id.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Index of a class in a taxonomy. Mask files store it as one byte.
pub type ClassId = u8;

/// Ignore value used by the 8-bit mask file encoding.
pub const DEFAULT_IGNORE_INDEX: ClassId = 255;

/// An 8-bit RGB triple.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Rgb([r, g, b])
    }

    pub const fn r(self) -> u8 {
        self.0[0]
    }

    pub const fn g(self) -> u8 {
        self.0[1]
    }

    pub const fn b(self) -> u8 {
        self.0[2]
    }

    /// Largest per-channel absolute difference.
    pub fn chebyshev(self, other: Rgb) -> u8 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for Rgb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.r(), self.g(), self.b())
    }
}

/// Taxonomic rank of a class.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Division,
    Class,
    Family,
    Genus,
    Species,
    NonPlant,
}

impl Rank {
    pub fn is_plant(self) -> bool {
        !matches!(self, Rank::NonPlant)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Rank::Division => "division",
            Rank::Class => "class",
            Rank::Family => "family",
            Rank::Genus => "genus",
            Rank::Species => "species",
            Rank::NonPlant => "non_plant",
        }
    }
}

/// A subspecies colour that merges into its parent class on decode.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Shade {
    pub colour: Rgb,
    /// Name used for the shade's line in generation prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colour_name: Option<String>,
}

impl Shade {
    pub fn new(colour: Rgb) -> Self {
        Shade {
            colour,
            label: None,
            colour_name: None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
    pub rank: Rank,
    pub colour: Rgb,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gradient_shades: Vec<Shade>,
    /// Name used when the class appears in a generation prompt (often the
    /// scientific name). Falls back to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_name: Option<String>,
    /// Human colour word used in generation prompts ("red", "cyan").
    /// Falls back to the numeric triple.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colour_name: Option<String>,
}

impl ClassDef {
    pub fn new(id: ClassId, name: impl Into<String>, rank: Rank, colour: Rgb) -> Self {
        ClassDef {
            id,
            name: name.into(),
            rank,
            colour,
            gradient_shades: Vec::new(),
            prompt_name: None,
            colour_name: None,
        }
    }

    pub fn with_prompt_name(mut self, prompt_name: impl Into<String>) -> Self {
        self.prompt_name = Some(prompt_name.into());
        self
    }

    pub fn with_colour_name(mut self, colour_name: impl Into<String>) -> Self {
        self.colour_name = Some(colour_name.into());
        self
    }

    pub fn with_shades(mut self, shades: Vec<Shade>) -> Self {
        self.gradient_shades = shades;
        self
    }

    pub fn prompt_name(&self) -> &str {
        self.prompt_name.as_deref().unwrap_or(&self.name)
    }

    pub fn colour_word(&self) -> String {
        match &self.colour_name {
            Some(word) => word.clone(),
            None => alloc::format!("{}", self.colour),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaxonomyError {
    #[error("taxonomy has no classes")]
    Empty,
    #[error("taxonomy has {0} classes, at most 255 fit an 8-bit mask")]
    TooManyClasses(usize),
    #[error("class ids must be contiguous from 0: position {position} holds id {id}")]
    NonContiguousId { position: usize, id: ClassId },
    #[error("ignore index {0} collides with a class id")]
    IgnoreCollides(ClassId),
    #[error("duplicate colour {colour} used by '{first}' and '{second}'")]
    DuplicateColour {
        colour: Rgb,
        first: String,
        second: String,
    },
    #[error("duplicate class name '{0}'")]
    DuplicateName(String),
    #[error("unknown class '{0}'")]
    UnknownClass(String),
}

/// Ordered class list plus the reserved ignore value.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct ClassTaxonomy {
    classes: Vec<ClassDef>,
    ignore_index: ClassId,
}

impl ClassTaxonomy {
    /// Validates ids, colours, names and the ignore index.
    pub fn new(classes: Vec<ClassDef>, ignore_index: ClassId) -> Result<Self, TaxonomyError> {
        if classes.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        if classes.len() > 255 {
            return Err(TaxonomyError::TooManyClasses(classes.len()));
        }
        for (position, class) in classes.iter().enumerate() {
            if usize::from(class.id) != position {
                return Err(TaxonomyError::NonContiguousId {
                    position,
                    id: class.id,
                });
            }
        }
        if usize::from(ignore_index) < classes.len() {
            return Err(TaxonomyError::IgnoreCollides(ignore_index));
        }

        let mut seen: Vec<(Rgb, String)> = Vec::new();
        for class in &classes {
            let own = core::iter::once((class.colour, class.name.clone())).chain(
                class.gradient_shades.iter().map(|s| {
                    let label = s.label.clone().unwrap_or_else(|| class.name.clone());
                    (s.colour, alloc::format!("{} shade '{}'", class.name, label))
                }),
            );
            for (colour, owner) in own {
                if let Some((_, first)) = seen.iter().find(|(c, _)| *c == colour) {
                    return Err(TaxonomyError::DuplicateColour {
                        colour,
                        first: first.clone(),
                        second: owner,
                    });
                }
                seen.push((colour, owner));
            }
        }
        for (i, a) in classes.iter().enumerate() {
            if classes[..i].iter().any(|b| b.name.eq_ignore_ascii_case(&a.name)) {
                return Err(TaxonomyError::DuplicateName(a.name.clone()));
            }
        }

        Ok(ClassTaxonomy {
            classes,
            ignore_index,
        })
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn ignore_index(&self) -> ClassId {
        self.ignore_index
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassDef> {
        self.classes.get(usize::from(id))
    }

    pub fn contains_id(&self, id: ClassId) -> bool {
        usize::from(id) < self.classes.len()
    }

    /// Looks a class up by its name or prompt name, ignoring ASCII case.
    pub fn by_name(&self, name: &str) -> Option<&ClassDef> {
        let name = name.trim();
        self.classes.iter().find(|c| {
            c.name.eq_ignore_ascii_case(name)
                || c.prompt_name
                    .as_deref()
                    .is_some_and(|p| p.eq_ignore_ascii_case(name))
        })
    }

    pub fn require(&self, name: &str) -> Result<&ClassDef, TaxonomyError> {
        self.by_name(name)
            .ok_or_else(|| TaxonomyError::UnknownClass(name.into()))
    }

    /// Every palette colour with the class it decodes to, in class-id order
    /// (primary colour first, then shades).
    pub fn palette_entries(&self) -> Vec<(Rgb, ClassId)> {
        let mut entries = Vec::new();
        for class in &self.classes {
            entries.push((class.colour, class.id));
            entries.extend(class.gradient_shades.iter().map(|s| (s.colour, class.id)));
        }
        entries
    }

    /// Number of distinct colours in the palette, shades included.
    pub fn palette_size(&self) -> usize {
        self.palette_entries().len()
    }

    /// Colour painted for ignore pixels by `encode_mask`. White unless the
    /// palette uses it, in which case the brightest unused grey.
    pub fn sentinel_colour(&self) -> Rgb {
        let entries = self.palette_entries();
        (0..=255u8)
            .rev()
            .map(|v| Rgb::new(v, v, v))
            .find(|c| entries.iter().all(|(p, _)| p != c))
            .unwrap_or(Rgb::new(255, 255, 254))
    }

    /// Plant classes eligible for the species slot of a generation prompt.
    /// Division-rank classes (moss) are treated as ground cover instead.
    pub fn generation_species_pool(&self) -> Vec<&ClassDef> {
        self.classes
            .iter()
            .filter(|c| c.rank.is_plant() && c.rank != Rank::Division)
            .collect()
    }

    /// Hex SHA-256 over ids, names, ranks and the ignore index. Colours are
    /// deliberately excluded: id masks stay valid across palette edits.
    pub fn schema_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"regenforge-taxonomy-v1\n");
        hasher.update([self.ignore_index]);
        for class in &self.classes {
            hasher.update([class.id]);
            hasher.update(class.name.as_bytes());
            hasher.update([0]);
            hasher.update(class.rank.as_str().as_bytes());
            hasher.update([0]);
        }
        crate::hex_encode(&hasher.finalize())
    }

    /// The 23-class forest regeneration taxonomy with the zero-shot palette.
    pub fn forest_regeneration() -> Self {
        build_builtin(&ZERO_SHOT_PALETTE, false)
    }

    /// Same classes as [`forest_regeneration`](Self::forest_regeneration)
    /// with the colour-word palette used by generation prompts, including
    /// three blue shades for the blueberry group.
    pub fn forest_regeneration_generation() -> Self {
        build_builtin(&GENERATION_PALETTE, true)
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::forest_regeneration()
    }
}

/// (name, rank, prompt name)
const BUILTIN_CLASSES: [(&str, Rank, &str); 23] = [
    ("American Mountain-Ash", Rank::Species, "Sorbus americana"),
    ("Other", Rank::NonPlant, "Other"),
    ("Bog Labrador Tea", Rank::Species, "Rhododendron groenlandicum"),
    ("Boulder", Rank::NonPlant, "Boulders"),
    ("Canada Yew", Rank::Species, "Taxus canadensis"),
    ("Fern", Rank::Class, "Fern"),
    ("Fir", Rank::Genus, "Abies"),
    ("Fire Cherry", Rank::Species, "Prunus pensylvanica"),
    ("Lowbush Blueberry", Rank::Species, "Vaccinium angustifolium"),
    ("Moss", Rank::Division, "Moss"),
    ("Mountain Maple", Rank::Species, "Acer spicatum"),
    ("Paper Birch", Rank::Species, "Betula papyrifera"),
    ("Pine", Rank::Genus, "Pinus"),
    ("Red Maple", Rank::Species, "Acer rubrum"),
    ("Red Raspberry", Rank::Species, "Rubus idaeus"),
    ("Sedge", Rank::Family, "Sedge"),
    ("Serviceberry", Rank::Genus, "Amelanchier"),
    ("Sheep Laurel", Rank::Species, "Kalmia angustifolia"),
    ("Spruce", Rank::Genus, "Picea"),
    ("Trembling Aspen", Rank::Species, "Populus tremuloides"),
    ("Willowherb", Rank::Genus, "Epilobium"),
    ("Wood", Rank::NonPlant, "Wood"),
    ("Yellow Birch", Rank::Species, "Betula alleghaniensis"),
];

const ZERO_SHOT_PALETTE: [([u8; 3], &str); 23] = [
    ([255, 0, 0], "red"),
    ([0, 0, 0], "black"),
    ([0, 255, 0], "green"),
    ([0, 0, 255], "blue"),
    ([255, 255, 0], "yellow"),
    ([255, 0, 255], "magenta"),
    ([0, 255, 255], "cyan"),
    ([128, 0, 0], "maroon"),
    ([0, 128, 0], "dark green"),
    ([0, 0, 128], "navy"),
    ([128, 128, 0], "olive"),
    ([128, 0, 128], "purple"),
    ([0, 128, 128], "teal"),
    ([192, 192, 192], "silver"),
    ([128, 128, 128], "grey"),
    ([255, 128, 0], "orange"),
    ([255, 0, 128], "rose"),
    ([255, 255, 128], "light yellow"),
    ([0, 255, 128], "spring green"),
    ([0, 128, 255], "azure"),
    ([128, 0, 255], "violet"),
    ([255, 128, 128], "salmon"),
    ([128, 255, 255], "light cyan"),
];

const GENERATION_PALETTE: [([u8; 3], &str); 23] = [
    ([255, 165, 0], "orange"),
    ([0, 0, 0], "black"),
    ([255, 192, 203], "pink"),
    ([128, 128, 128], "grey"),
    ([0, 100, 0], "dark green"),
    ([255, 0, 255], "magenta"),
    ([255, 0, 0], "red"),
    ([128, 0, 0], "maroon"),
    ([0, 0, 128], "navy"),
    ([0, 255, 0], "green"),
    ([128, 128, 0], "olive"),
    ([245, 245, 220], "beige"),
    ([0, 128, 128], "teal"),
    ([0, 255, 255], "cyan"),
    ([220, 20, 60], "crimson"),
    ([240, 230, 140], "khaki"),
    ([165, 42, 42], "brown"),
    ([255, 255, 0], "yellow"),
    ([127, 255, 0], "chartreuse"),
    ([255, 127, 80], "coral"),
    ([0, 0, 255], "blue"),
    ([128, 0, 128], "purple"),
    ([210, 180, 140], "tan"),
];

const BLUEBERRY_SHADES: [([u8; 3], &str, &str); 3] = [
    ([173, 216, 230], "Vaccinium angustifolium", "light blue"),
    ([100, 149, 237], "Vaccinium myrtilloides", "cornflower blue"),
    ([70, 130, 180], "Vaccinium boreale", "steel blue"),
];

fn build_builtin(palette: &[([u8; 3], &str); 23], with_shades: bool) -> ClassTaxonomy {
    let classes = BUILTIN_CLASSES
        .iter()
        .zip(palette.iter())
        .enumerate()
        .map(|(id, ((name, rank, prompt), (rgb, word)))| {
            let mut class = ClassDef::new(id as ClassId, *name, *rank, Rgb(*rgb))
                .with_prompt_name(*prompt)
                .with_colour_name(*word);
            if with_shades && *name == "Lowbush Blueberry" {
                class.gradient_shades = BLUEBERRY_SHADES
                    .iter()
                    .map(|(rgb, label, word)| Shade {
                        colour: Rgb(*rgb),
                        label: Some((*label).into()),
                        colour_name: Some((*word).into()),
                    })
                    .collect();
            }
            class
        })
        .collect();
    ClassTaxonomy::new(classes, DEFAULT_IGNORE_INDEX).expect("builtin taxonomy is valid")
}
