//! Fine-tunes a retrieval backbone from a pretraining checkpoint and from
//! random weights, then evaluates both in-domain and across domains.
//! Expects a run directory produced by the `pretrain` example.
//!
//! ```text
//! cargo run --release --example finetune_eval -- runs/pretrain
//! ```

use vtbr::config::RunConfig;
use vtbr::pipeline::{eval_stage, finetune_stage, load_domains, InitSource, RunDir};

fn main() -> vtbr::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "runs/pretrain".into());
    let mut config = RunConfig::toy();
    config.out = root.clone().into();
    let run = RunDir { root: root.into() };
    let domains = load_domains(&run)?;
    let train = domains.iter().find(|d| d.domain() == "a").expect("toy domain a");
    for init in [InitSource::Checkpoint(run.ckpt("pretrain.ckpt")), InitSource::Random] {
        let outcome = finetune_stage(&config, &init, train)?;
        let last = outcome.log.last().expect("at least one step");
        println!(
            "init {}: final loss {:.3} (ce {:.3}, triplet {:.3})",
            outcome.init, last.loss, last.loss_ce, last.loss_triplet
        );
        for r in eval_stage(&outcome.model, "a", outcome.init, &domains, &config.lineage("eval"))? {
            println!(
                "  a -> {}: mAP {:5.2}  rank-1 {:5.2}  (random ranking {:5.2})",
                r.protocol.test_domain,
                100.0 * r.map,
                100.0 * r.cmc[&1],
                100.0 * r.random_map
            );
        }
    }
    Ok(())
}
