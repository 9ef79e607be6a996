//! Run configuration: one JSON file with a section per stage, environment
//! overrides, validation, and the lineage record stamped on every artifact.
//!
//! Overrides are read from `VTBR_SEED`, `VTBR_OUT` and, for any nested field,
//! `VTBR_<SECTION>__<FIELD>` (e.g. `VTBR_PRETRAIN__TOTAL_STEPS=20`). Values
//! are parsed as JSON and fall back to plain strings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attributes::{AttributeSchema, SceneUnit};
use crate::captions::{CaptionTemplate, RsConfig};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::scene::{RenderConfig, SplitConfig};
use crate::toy::{toy_schema, PopulationConfig, TOY_TEMPLATE};

/// The bundled toy configuration.
pub const TOY_CONFIG: &str = include_str!("../configs/toy.json");

const ENV_PREFIX: &str = "VTBR_";

/// Where attribute records come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Schema file; the bundled toy schema when absent.
    pub schema: Option<PathBuf>,
    /// Domain name to annotation file. When empty, a toy population is
    /// generated from `population`.
    pub annotations: BTreeMap<String, PathBuf>,
    pub population: PopulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionSection {
    /// Caption template; the bundled toy template when absent.
    pub template: Option<String>,
    /// An attribute is mentioned iff its appearance probability is at most `alpha`.
    pub alpha: f64,
    pub scene_unit: SceneUnit,
    /// Keep one record per distinct (identity, caption) for pretraining.
    pub rs_select: bool,
    /// Tokens seen fewer times map to `<unk>`.
    pub min_token_freq: usize,
}

impl Default for CaptionSection {
    fn default() -> Self {
        Self {
            template: None,
            alpha: 0.8,
            scene_unit: SceneUnit::Observation,
            rs_select: true,
            min_token_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Domain used for fine-tuning; the first domain when absent.
    pub train_domain: Option<String>,
    /// Test images of the training domain exported as saliency maps.
    pub saliency_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            train_domain: None,
            saliency_images: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; replaces the per-section seeds.
    pub seed: u64,
    /// Run directory. Not part of the config hash.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub data: DataSection,
    pub captions: CaptionSection,
    pub render: RenderConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataSection::default(),
            captions: CaptionSection::default(),
            render: RenderConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Sets `path` (lowercase keys) inside `root` to `value`, creating objects.
fn set_path(root: &mut serde_json::Value, path: &[String], value: serde_json::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = root;
    for key in parents {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(path.join("."), "override crosses a non-object field"))?;
        node = obj
            .entry(key.clone())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::config(path.join("."), "override crosses a non-object field"))?
        .insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// The bundled toy configuration.
    pub fn toy() -> Self {
        Self::from_json(TOY_CONFIG).expect("bundled toy config parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative file references relative to `base`.
    fn resolve_paths(&mut self, base: &Path) {
        if let Some(s) = &mut self.data.schema {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        for p in self.data.annotations.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Applies `VTBR_*` overrides from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let out = self.out.clone();
        let mut tree = serde_json::to_value(&*self)?;
        let mut new_out = None;
        for (key, value) in vars {
            let (key, value) = (key.as_ref(), value.as_ref());
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            if rest == "OUT" {
                new_out = Some(PathBuf::from(value));
                continue;
            }
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::config(key, "malformed override name"));
            }
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            set_path(&mut tree, &path, parsed)?;
        }
        let mut updated: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::config("environment override", e.to_string()))?;
        updated.out = new_out.unwrap_or(out);
        *self = updated;
        Ok(())
    }

    /// Copies the global seed into the stage sections.
    pub fn propagate_seed(&mut self) {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        match &self.data.schema {
            Some(path) => AttributeSchema::load(path),
            None => Ok(toy_schema()),
        }
    }

    pub fn template(&self) -> Result<CaptionTemplate> {
        CaptionTemplate::parse(self.captions.template.as_deref().unwrap_or(TOY_TEMPLATE))
    }

    pub fn rs(&self) -> Result<RsConfig> {
        RsConfig::new(self.captions.alpha).map_err(|e| Error::config("captions.alpha", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.captions.alpha) {
            return Err(Error::config(
                "captions.alpha",
                format!("{} is outside [0, 1]", self.captions.alpha),
            ));
        }
        if let Some(path) = &self.data.schema {
            if !path.is_file() {
                return Err(Error::config(
                    "data.schema",
                    format!("{} does not exist", path.display()),
                ));
            }
        }
        for (domain, path) in &self.data.annotations {
            if !path.is_file() {
                return Err(Error::config(
                    format!("data.annotations.{domain}"),
                    format!("{} does not exist", path.display()),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.split.pretrain_fraction) {
            return Err(Error::config("split.pretrain_fraction", "must lie in [0, 1)"));
        }
        if self.render.height != self.model.image_height || self.render.width != self.model.image_width {
            return Err(Error::config(
                "model.image_height",
                "image size differs from the render size",
            ));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let template = self.template()?;
        template.validate(&self.schema()?)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn lineage(&self, stage: &str) -> Lineage {
        Lineage {
            config_hash: self.hash(),
            seed: self.seed,
            stage: stage.to_string(),
        }
    }
}

/// Which configuration, seed and stage produced an artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
}

impl Lineage {
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("lineage serializes")
    }

    /// Writes `<artifact>.lineage.json` next to an artifact whose own format
    /// has no room for it.
    pub fn write_sidecar(&self, artifact: &Path) -> Result<()> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".lineage.json");
        let path = PathBuf::from(name);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        let c = RunConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.captions.alpha, 0.8);
    }

    #[test]
    fn env_overrides_nested_fields() {
        let mut c = RunConfig::toy();
        c.apply_env([
            ("VTBR_SEED", "7"),
            ("VTBR_OUT", "/tmp/x"),
            ("VTBR_PRETRAIN__TOTAL_STEPS", "12"),
            ("VTBR_CAPTIONS__SCENE_UNIT", "identity"),
            ("HOME", "/root"),
        ])
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.out, PathBuf::from("/tmp/x"));
        assert_eq!(c.pretrain.total_steps, 12);
        assert_eq!(c.captions.scene_unit, SceneUnit::Identity);
    }

    #[test]
    fn unknown_override_field_is_rejected() {
        let mut c = RunConfig::toy();
        assert!(matches!(
            c.apply_env([("VTBR_PRETRAIN__NOPE", "1")]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn alpha_outside_unit_interval_names_the_field() {
        let mut c = RunConfig::toy();
        c.captions.alpha = 2.0;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "captions.alpha"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let a = RunConfig::toy();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
