//! Every stage end to end on the bundled toy configuration, the same as
//! `vtbr pipeline`. `VTBR_*` environment overrides apply, e.g.
//! `VTBR_PRETRAIN__TOTAL_STEPS=100`.
//!
//! ```text
//! cargo run --release --example pipeline -- runs/toy
//! ```

use vtbr::cli::resolve_config;
use vtbr::pipeline::run_pipeline;

fn main() -> vtbr::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/toy".into());
    let config = resolve_config(None, Some(out.as_ref()), None, std::env::vars())?;
    let outcome = run_pipeline(&config)?;
    println!(
        "run directory {} (config {})",
        outcome.run.root.display(),
        &config.hash()[..12]
    );
    for (domain, stats) in &outcome.captions.domains {
        println!(
            "captions {domain}: {} records, {} distinct captions, {:.1} tokens on average",
            stats.records, stats.distinct_captions, stats.mean_tokens
        );
    }
    if let Some(ppl) = outcome.pretrain.holdout_perplexity {
        println!("held-out caption perplexity {ppl:.3}");
    }
    for r in &outcome.reports {
        println!(
            "{} -> {}: mAP {:.2}, rank-1 {:.2}",
            r.protocol.train_domain,
            r.protocol.test_domain,
            100.0 * r.map,
            100.0 * r.cmc[&1]
        );
    }
    println!(
        "{} saliency maps in {}",
        outcome.saliency.len(),
        outcome.run.reports().join("saliency").display()
    );
    Ok(())
}
