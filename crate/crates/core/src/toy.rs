//! The bundled toy population: a pedestrian-like attribute schema, a caption
//! template, and a seeded generator of identities observed by several cameras
//! in several scene domains.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeRecord, AttributeSchema, Category, Level};
use crate::captions::CaptionTemplate;
use crate::error::{Error, Result};

pub fn toy_schema() -> AttributeSchema {
    AttributeSchema {
        categories: vec![
            Category::new(
                "hair",
                Level::Identity,
                &["short hair", "long hair", "curly hair", "ponytail", "bald head"],
            ),
            Category::new(
                "upper",
                Level::Identity,
                &[
                    "red shirt",
                    "blue shirt",
                    "white shirt",
                    "green jacket",
                    "black coat",
                    "yellow top",
                ],
            ),
            Category::new(
                "bag",
                Level::Identity,
                &["no bag", "a backpack", "a handbag", "a shoulder bag"],
            ),
            Category::new(
                "lower",
                Level::Identity,
                &[
                    "black pants",
                    "blue jeans",
                    "grey shorts",
                    "brown skirt",
                    "white trousers",
                ],
            ),
            Category::new(
                "shoes",
                Level::Identity,
                &["white sneakers", "black boots", "brown shoes", "red sandals"],
            ),
            Category::new("background", Level::Scene, &["street", "park", "mall", "station"]),
            Category::new(
                "illumination",
                Level::Scene,
                &["bright light", "dim light", "dusk light"],
            ),
            Category::new("weather", Level::Scene, &["sunny day", "cloudy day", "rainy day"]),
            Category::new("viewpoint", Level::Scene, &["front", "back", "side"]),
        ],
    }
}

pub const TOY_TEMPLATE: &str = "a person {with <hair>} {wearing a <upper>} {carrying <bag>} \
    {and <lower>} {with <shoes>} {in the <background>} {under <illumination>} \
    {on a <weather>} {seen from the <viewpoint>}";

pub fn toy_template() -> CaptionTemplate {
    CaptionTemplate::parse(TOY_TEMPLATE).expect("bundled template parses")
}

/// Scene-value weights of one capture domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Category name to per-value weights, in schema value order.
    pub scene_weights: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub identities: usize,
    pub cameras: u64,
    /// Per-value weights of identity-level categories; uniform when absent.
    pub identity_weights: BTreeMap<String, Vec<f64>>,
    pub domains: Vec<DomainSpec>,
}

fn weights(pairs: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            identities: 64,
            cameras: 4,
            identity_weights: weights(&[
                ("hair", &[0.40, 0.25, 0.15, 0.12, 0.08]),
                ("upper", &[0.30, 0.22, 0.16, 0.14, 0.10, 0.08]),
                ("bag", &[0.45, 0.25, 0.18, 0.12]),
                ("lower", &[0.35, 0.25, 0.18, 0.12, 0.10]),
                ("shoes", &[0.40, 0.25, 0.20, 0.15]),
            ]),
            domains: vec![
                DomainSpec {
                    name: "a".into(),
                    scene_weights: weights(&[
                        ("background", &[0.6, 0.4, 0.0, 0.0]),
                        ("illumination", &[0.9, 0.1, 0.0]),
                        ("weather", &[0.9, 0.1, 0.0]),
                        ("viewpoint", &[0.4, 0.3, 0.3]),
                    ]),
                },
                DomainSpec {
                    name: "b".into(),
                    scene_weights: weights(&[
                        ("background", &[0.0, 0.0, 0.5, 0.5]),
                        ("illumination", &[0.1, 0.6, 0.3]),
                        ("weather", &[0.8, 0.0, 0.2]),
                        ("viewpoint", &[0.4, 0.3, 0.3]),
                    ]),
                },
            ],
        }
    }
}

fn sampler(cat: &Category, weights: Option<&Vec<f64>>) -> Result<WeightedIndex<f64>> {
    let w = match weights {
        Some(w) if w.len() != cat.values.len() => {
            return Err(Error::config(
                format!("population weights.{}", cat.name),
                format!("{} weights for {} values", w.len(), cat.values.len()),
            ))
        }
        Some(w) => w.clone(),
        None => vec![1.0; cat.values.len()],
    };
    WeightedIndex::new(w).map_err(|e| Error::config(format!("population weights.{}", cat.name), e.to_string()))
}

/// Records per domain, in `(identity, camera)` order. Every identity has a
/// distinct combination of identity-level values.
pub fn generate_population(
    schema: &AttributeSchema,
    config: &PopulationConfig,
    seed: u64,
) -> Result<Vec<(String, Vec<AttributeRecord>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id_cats: Vec<&Category> = schema
        .categories
        .iter()
        .filter(|c| c.level == Level::Identity)
        .collect();
    let scene_cats: Vec<&Category> = schema.categories.iter().filter(|c| c.level == Level::Scene).collect();
    let id_samplers = id_cats
        .iter()
        .map(|c| sampler(c, config.identity_weights.get(&c.name)))
        .collect::<Result<Vec<_>>>()?;

    let combos: usize = id_cats.iter().map(|c| c.values.len()).product();
    if combos < config.identities {
        return Err(Error::config(
            "population.identities",
            format!("only {combos} distinct identity combinations exist"),
        ));
    }
    let mut seen = BTreeSet::new();
    let mut identities: Vec<Vec<usize>> = Vec::with_capacity(config.identities);
    while identities.len() < config.identities {
        let combo: Vec<usize> = id_samplers.iter().map(|s| s.sample(&mut rng)).collect();
        if seen.insert(combo.clone()) {
            identities.push(combo);
        }
    }

    let mut out = Vec::new();
    for domain in &config.domains {
        let scene_samplers = scene_cats
            .iter()
            .map(|c| sampler(c, domain.scene_weights.get(&c.name)))
            .collect::<Result<Vec<_>>>()?;
        let mut records = Vec::new();
        for (id, combo) in identities.iter().enumerate() {
            for cam in 0..config.cameras {
                let mut values = BTreeMap::new();
                for (cat, &vi) in id_cats.iter().zip(combo) {
                    values.insert(cat.name.clone(), cat.values[vi].clone());
                }
                for (cat, s) in scene_cats.iter().zip(&scene_samplers) {
                    values.insert(cat.name.clone(), cat.values[s.sample(&mut rng)].clone());
                }
                records.push(AttributeRecord {
                    identity_id: id as u64,
                    camera_id: cam,
                    values,
                });
            }
        }
        out.push((domain.name.clone(), records));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::validate_schema;

    #[test]
    fn bundled_schema_and_template_are_valid() {
        assert!(validate_schema(&toy_schema()).is_empty());
        toy_template().validate(&toy_schema()).unwrap();
    }

    #[test]
    fn population_is_deterministic_and_valid() {
        let schema = toy_schema();
        let cfg = PopulationConfig::default();
        let a = generate_population(&schema, &cfg, 7).unwrap();
        let b = generate_population(&schema, &cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for (_, records) in &a {
            assert_eq!(records.len(), 64 * 4);
            for r in records {
                schema.check_record(r).unwrap();
            }
        }
        // identity-level values agree across domains
        for (ra, rb) in a[0].1.iter().zip(&a[1].1) {
            assert_eq!(ra.values["hair"], rb.values["hair"]);
            assert_eq!(ra.identity_id, rb.identity_id);
        }
        // domain palettes are disjoint for backgrounds
        let bg = |recs: &[AttributeRecord]| {
            recs.iter()
                .map(|r| r.values["background"].clone())
                .collect::<BTreeSet<_>>()
        };
        assert!(bg(&a[0].1).is_disjoint(&bg(&a[1].1)));
    }

    #[test]
    fn weight_length_mismatch_is_a_config_error() {
        let mut cfg = PopulationConfig::default();
        cfg.identity_weights.insert("hair".into(), vec![1.0]);
        assert!(matches!(
            generate_population(&toy_schema(), &cfg, 0),
            Err(Error::Config { .. })
        ));
    }
}
