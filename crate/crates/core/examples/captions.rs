//! Attribute frequencies, captions at several thresholds, deduplication and
//! the vocabulary for one toy domain.
//!
//! ```text
//! cargo run --example captions
//! ```

use vtbr::attributes::{attribute_frequencies, SceneUnit};
use vtbr::captions::{build_vocabulary, generate_corpus, rs_select, RsConfig};
use vtbr::toy::{generate_population, toy_schema, toy_template, PopulationConfig};

fn main() -> vtbr::Result<()> {
    let schema = toy_schema();
    let template = toy_template();
    let (domain, records) = generate_population(&schema, &PopulationConfig::default(), 0)?.remove(0);
    let freq = attribute_frequencies(&records, &schema, SceneUnit::Observation)?;
    println!("domain {domain}: {} records", records.len());
    println!("template: {}", template.to_text());

    let r = &records[0];
    for category in ["hair", "upper", "background", "weather"] {
        let value = r.value(category).unwrap_or("?");
        let p = freq.probability(category, value).unwrap_or(f64::NAN);
        println!("  P({category} = {value}) = {p:.3}");
    }
    for alpha in [0.0, 0.25, 0.5, 0.8, 1.0] {
        let captions = generate_corpus(&records, &template, &freq, RsConfig::new(alpha)?)?;
        let kept = rs_select(&records, &captions)?;
        let mean = captions.iter().map(|c| c.len()).sum::<usize>() as f64 / captions.len() as f64;
        println!(
            "alpha {alpha:.2}: {mean:5.1} tokens on average, {} of {} records after dedup\n    {}",
            kept.len(),
            records.len(),
            captions[0].text()
        );
    }
    let captions = generate_corpus(&records, &template, &freq, RsConfig::new(0.8)?)?;
    let vocab = build_vocabulary(&captions, 1)?;
    println!(
        "vocabulary: {} tokens, ids of the first caption {:?}",
        vocab.len(),
        vocab.encode(&captions[0])
    );
    Ok(())
}
