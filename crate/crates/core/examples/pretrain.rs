//! Caption pretraining on the toy pretraining identities: generates captions
//! and images into a run directory, trains the caption model and reports
//! held-out perplexity.
//!
//! ```text
//! cargo run --release --example pretrain -- runs/pretrain 300
//! ```

use vtbr::config::RunConfig;
use vtbr::pipeline::{gen_captions, pretrain_stage, synth_data, RunDir};

fn main() -> vtbr::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = RunConfig::toy();
    config.out = args.next().unwrap_or_else(|| "runs/pretrain".into()).into();
    if let Some(steps) = args.next().and_then(|s| s.parse().ok()) {
        config.pretrain.total_steps = steps;
        config.pretrain.warmup_steps = (steps / 10).max(1);
        config.pretrain.eval_every = (steps / 5).max(1);
    }
    config.validate()?;
    let run = RunDir::create(&config.out)?;
    gen_captions(&config, &run)?;
    synth_data(&config, &run)?;
    let (model, report) = pretrain_stage(&config, &run)?;
    println!(
        "{} caption pairs ({} held out), vocabulary {}, {} steps",
        report.pairs, report.holdout_pairs, report.vocab_size, report.steps
    );
    if let Some(ppl) = report.holdout_perplexity {
        println!("held-out perplexity {ppl:.3} (uniform guessing: {})", report.vocab_size);
    }
    println!(
        "{} parameters written to {}",
        model.params.num_scalars(),
        run.ckpt("pretrain.ckpt").display()
    );
    Ok(())
}
