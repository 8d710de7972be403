//! TOML configuration: taxonomies, attribute spaces, QA thresholds and the
//! optional global config named by `REGENFORGE_CONFIG`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use regenforge_core::pair::QaThresholds;
use regenforge_core::prompt::AttributeSpace;
use regenforge_core::pseudo::WindowSpec;
use regenforge_core::review::DEFAULT_LEASE_MS;
use regenforge_core::taxonomy::{ClassDef, ClassId, ClassTaxonomy, Rank, Rgb, Shade, DEFAULT_IGNORE_INDEX};

use crate::error::{Error, Result};

pub const CONFIG_ENV: &str = "REGENFORGE_CONFIG";

/// Shipped copies of the builtin configuration.
pub const TAXONOMY_TOML: &str = include_str!("../config/taxonomy.toml");
pub const TAXONOMY_GENERATION_TOML: &str = include_str!("../config/taxonomy_generation.toml");
pub const ATTRIBUTES_TOML: &str = include_str!("../config/attributes.toml");
pub const QA_THRESHOLDS_TOML: &str = include_str!("../config/qa_thresholds.toml");

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<ClassId>,
    name: String,
    rank: Rank,
    colour: Rgb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    colour_name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    shades: Vec<Shade>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    #[serde(default = "default_ignore")]
    ignore_index: ClassId,
    #[serde(rename = "class")]
    classes: Vec<ClassEntry>,
}

fn default_ignore() -> ClassId {
    DEFAULT_IGNORE_INDEX
}

fn line_of(text: &str, span: Option<std::ops::Range<usize>>) -> usize {
    span.map(|s| text[..s.start.min(text.len())].lines().count().max(1)).unwrap_or(0)
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_of(text, e.span()),
        message: e.message().to_string(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a taxonomy file. Class ids default to list position.
pub fn parse_taxonomy(text: &str, path: &Path) -> Result<ClassTaxonomy> {
    let file: TaxonomyFile = parse_toml(text, path)?;
    let classes = file
        .classes
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let id = c.id.unwrap_or(i as ClassId);
            let mut def = ClassDef::new(id, c.name, c.rank, c.colour).with_shades(c.shades);
            def.prompt_name = c.prompt_name;
            def.colour_name = c.colour_name;
            def
        })
        .collect();
    Ok(ClassTaxonomy::new(classes, file.ignore_index)?)
}

pub fn load_taxonomy(path: &Path) -> Result<ClassTaxonomy> {
    parse_taxonomy(&read_text(path)?, path)
}

/// Serialises a taxonomy in the file format read by [`parse_taxonomy`].
pub fn taxonomy_to_toml(taxonomy: &ClassTaxonomy) -> String {
    let file = TaxonomyFile {
        ignore_index: taxonomy.ignore_index(),
        classes: taxonomy
            .classes()
            .iter()
            .map(|c| ClassEntry {
                id: None,
                name: c.name.clone(),
                rank: c.rank,
                colour: c.colour,
                prompt_name: c.prompt_name.clone(),
                colour_name: c.colour_name.clone(),
                shades: c.gradient_shades.clone(),
            })
            .collect(),
    };
    toml::to_string(&file).expect("taxonomy serialises")
}

pub fn load_attributes(path: &Path) -> Result<AttributeSpace> {
    let space: AttributeSpace = parse_toml(&read_text(path)?, path)?;
    space.validate()?;
    Ok(space)
}

pub fn load_thresholds(path: &Path) -> Result<QaThresholds> {
    parse_toml(&read_text(path)?, path)
}

/// Global defaults. Relative paths resolve against the config file's
/// directory.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub taxonomy: Option<PathBuf>,
    pub generation_taxonomy: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
    pub lease_ms: Option<u64>,
    pub window: Option<WindowSpec>,
    pub classifier_cmd: Option<String>,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: AppConfig = parse_toml(&read_text(path)?, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.taxonomy,
            &mut cfg.generation_taxonomy,
            &mut cfg.attributes,
            &mut cfg.thresholds,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Loads the file named by `REGENFORGE_CONFIG`, if set.
    pub fn from_env() -> Result<Option<(PathBuf, Self)>> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => {
                let path = PathBuf::from(p);
                let cfg = Self::load(&path)?;
                Ok(Some((path, cfg)))
            }
            _ => Ok(None),
        }
    }

    pub fn taxonomy(&self, flag: Option<&Path>) -> Result<ClassTaxonomy> {
        match flag.or(self.taxonomy.as_deref()) {
            Some(p) => load_taxonomy(p),
            None => Ok(ClassTaxonomy::forest_regeneration()),
        }
    }

    pub fn generation_taxonomy(&self, flag: Option<&Path>) -> Result<ClassTaxonomy> {
        match flag.or(self.generation_taxonomy.as_deref()) {
            Some(p) => load_taxonomy(p),
            None => Ok(ClassTaxonomy::forest_regeneration_generation()),
        }
    }

    pub fn attributes(&self, flag: Option<&Path>) -> Result<AttributeSpace> {
        match flag.or(self.attributes.as_deref()) {
            Some(p) => load_attributes(p),
            None => Ok(AttributeSpace::default()),
        }
    }

    pub fn thresholds(&self, flag: Option<&Path>) -> Result<QaThresholds> {
        match flag.or(self.thresholds.as_deref()) {
            Some(p) => load_thresholds(p),
            None => Ok(QaThresholds::default()),
        }
    }

    pub fn lease_ms(&self) -> u64 {
        self.lease_ms.unwrap_or(DEFAULT_LEASE_MS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.toml")
    }

    #[test]
    fn shipped_taxonomies_equal_builtins() {
        assert_eq!(parse_taxonomy(TAXONOMY_TOML, p()).unwrap(), ClassTaxonomy::forest_regeneration());
        assert_eq!(
            parse_taxonomy(TAXONOMY_GENERATION_TOML, p()).unwrap(),
            ClassTaxonomy::forest_regeneration_generation()
        );
    }

    #[test]
    fn shipped_attributes_and_thresholds_equal_defaults() {
        let space: AttributeSpace = parse_toml(ATTRIBUTES_TOML, p()).unwrap();
        assert_eq!(space, AttributeSpace::default());
        let t: QaThresholds = parse_toml(QA_THRESHOLDS_TOML, p()).unwrap();
        assert_eq!(t, QaThresholds::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let tax = ClassTaxonomy::forest_regeneration_generation();
        assert_eq!(parse_taxonomy(&taxonomy_to_toml(&tax), p()).unwrap(), tax);
    }

    #[test]
    fn duplicate_colour_names_both_classes() {
        let text = r#"
[[class]]
name = "A"
rank = "species"
colour = [255, 0, 0]

[[class]]
name = "B"
rank = "genus"
colour = [255, 0, 0]
"#;
        let err = parse_taxonomy(text, p()).unwrap_err().to_string();
        assert!(err.contains("'A'") && err.contains("'B'"), "{err}");
    }

    #[test]
    fn missing_field_reports_line() {
        let text = "[[class]]\nname = \"A\"\nrank = \"species\"\n\n[[class]]\nname = \"B\"\ncolour = [1, 2, 3]\n";
        match parse_taxonomy(text, p()).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert!(line >= 1, "{line}");
                assert!(message.contains("colour") || message.contains("rank"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn four_classes_two_shades_give_six_colours() {
        let text = r#"
[[class]]
name = "A"
rank = "species"
colour = [255, 0, 0]
shades = [{ colour = [0, 0, 200] }, { colour = [0, 0, 150] }]

[[class]]
name = "B"
rank = "genus"
colour = [0, 255, 0]

[[class]]
name = "C"
rank = "division"
colour = [0, 0, 255]

[[class]]
name = "D"
rank = "non_plant"
colour = [9, 9, 9]
"#;
        let tax = parse_taxonomy(text, p()).unwrap();
        assert_eq!(tax.len(), 4);
        assert_eq!(tax.palette_size(), 6);
    }

    /// Rewrites the shipped files from the builtins when
    /// `REGENFORGE_BLESS=1`.
    #[test]
    fn bless_shipped_config() {
        if std::env::var_os("REGENFORGE_BLESS").is_none() {
            return;
        }
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("config");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("taxonomy.toml"), taxonomy_to_toml(&ClassTaxonomy::forest_regeneration())).unwrap();
        fs::write(
            dir.join("taxonomy_generation.toml"),
            taxonomy_to_toml(&ClassTaxonomy::forest_regeneration_generation()),
        )
        .unwrap();
        fs::write(dir.join("attributes.toml"), toml::to_string(&AttributeSpace::default()).unwrap()).unwrap();
        fs::write(dir.join("qa_thresholds.toml"), toml::to_string(&QaThresholds::default()).unwrap()).unwrap();
    }
}
