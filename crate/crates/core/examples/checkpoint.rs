//! Checkpoint files: a bit-exact round trip, the backbone hand-off from the
//! caption model to the retrieval model, and detection of a corrupted byte.
//!
//! ```text
//! cargo run --example checkpoint
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vtbr::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointMeta};
use vtbr::finetune::ReidModel;
use vtbr::model::{CaptionModel, ModelConfig};

fn main() -> vtbr::Result<()> {
    let config = ModelConfig::default();
    let model = CaptionModel::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let meta = CheckpointMeta {
        stage: "pretrain".into(),
        step: 0,
        seed: 0,
        config_hash: "example".into(),
        model: config.clone(),
        extra: serde_json::Value::Null,
    };
    let bytes = encode_checkpoint(&model.params, &meta)?;
    let path = std::path::Path::new("in-memory.ckpt");
    let (params, read) = decode_checkpoint(&bytes, path)?;
    println!(
        "{} arrays, {} scalars, {} bytes; round trip exact: {}",
        params.len(),
        params.num_scalars(),
        bytes.len(),
        params == model.params && read == meta
    );

    let mut reid = ReidModel::new(config, 10, &mut ChaCha8Rng::seed_from_u64(1))?;
    reid.load_backbone(&params)?;
    let visual = reid
        .params
        .entries()
        .iter()
        .filter(|e| e.name.starts_with("visual."))
        .count();
    println!(
        "retrieval model: {visual} backbone arrays loaded, classifier over {} identities",
        reid.classes()
    );

    let mut damaged = bytes.clone();
    let last = damaged.len() - 1;
    damaged[last] ^= 1;
    match decode_checkpoint(&damaged, path) {
        Err(e) => println!("flipped byte detected: {e}"),
        Ok(_) => println!("flipped byte went unnoticed"),
    }
    Ok(())
}
