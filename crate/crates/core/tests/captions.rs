//! Caption generation properties on generated populations.

use std::collections::BTreeSet;

use proptest::prelude::*;

use vtbr::attributes::{attribute_frequencies, SceneUnit};
use vtbr::captions::{build_vocabulary, generate_corpus, load_corpus, rs_select, save_corpus, RsConfig};
use vtbr::toy::{generate_population, toy_schema, toy_template, PopulationConfig};

fn population(identities: usize, cameras: u64, seed: u64) -> Vec<vtbr::attributes::AttributeRecord> {
    let config = PopulationConfig {
        identities,
        cameras,
        ..Default::default()
    };
    generate_population(&toy_schema(), &config, seed).unwrap().remove(0).1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn captions_grow_with_alpha(identities in 4usize..30, cameras in 1u64..4, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let records = population(identities, cameras, seed);
        let schema = toy_schema();
        let freq = attribute_frequencies(&records, &schema, SceneUnit::Observation).unwrap();
        let template = toy_template();
        let short = generate_corpus(&records, &template, &freq, RsConfig::new(lo).unwrap()).unwrap();
        let long = generate_corpus(&records, &template, &freq, RsConfig::new(hi).unwrap()).unwrap();
        for (s, l) in short.iter().zip(&long) {
            // every token kept at the lower threshold survives at the higher one
            prop_assert!(s.len() <= l.len());
            let mut it = l.interior().iter();
            prop_assert!(s.interior().iter().all(|t| it.any(|u| u == t)), "{} not in {}", s.text(), l.text());
        }
        let all = generate_corpus(&records, &template, &freq, RsConfig::new(1.0).unwrap()).unwrap();
        for (r, c) in records.iter().zip(&all) {
            for v in r.values.values() {
                prop_assert!(c.text().contains(v.as_str()));
            }
        }
    }

    #[test]
    fn selection_keeps_one_record_per_identity_and_caption(identities in 2usize..30, cameras in 1u64..5, seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let records = population(identities, cameras, seed);
        let freq = attribute_frequencies(&records, &toy_schema(), SceneUnit::Observation).unwrap();
        let captions = generate_corpus(&records, &toy_template(), &freq, RsConfig::new(alpha).unwrap()).unwrap();
        let kept = rs_select(&records, &captions).unwrap();
        let distinct: BTreeSet<(u64, String)> =
            records.iter().zip(&captions).map(|(r, c)| (r.identity_id, c.text())).collect();
        prop_assert_eq!(kept.len(), distinct.len());
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let ids: BTreeSet<u64> = records.iter().map(|r| r.identity_id).collect();
        let kept_ids: BTreeSet<u64> = kept.iter().map(|&i| records[i].identity_id).collect();
        prop_assert_eq!(ids, kept_ids);
    }

    #[test]
    fn vocabulary_encodes_every_corpus_caption(identities in 2usize..20, seed in any::<u64>()) {
        let records = population(identities, 2, seed);
        let freq = attribute_frequencies(&records, &toy_schema(), SceneUnit::Observation).unwrap();
        let captions = generate_corpus(&records, &toy_template(), &freq, RsConfig::new(0.8).unwrap()).unwrap();
        let vocab = build_vocabulary(&captions, 1).unwrap();
        for c in &captions {
            prop_assert_eq!(vocab.decode(&vocab.encode(c)), c.tokens().to_vec());
        }
    }
}

#[test]
fn corpus_file_round_trip() {
    let records = population(6, 3, 1);
    let freq = attribute_frequencies(&records, &toy_schema(), SceneUnit::Observation).unwrap();
    let captions = generate_corpus(&records, &toy_template(), &freq, RsConfig::new(0.8).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    save_corpus(&path, &records, &captions).unwrap();
    let lines = load_corpus(&path).unwrap();
    assert_eq!(lines.len(), records.len());
    for ((line, r), c) in lines.iter().zip(&records).zip(&captions) {
        assert_eq!((line.id, line.cam), (r.identity_id, r.camera_id));
        assert_eq!(line.caption, c.text());
    }
}
