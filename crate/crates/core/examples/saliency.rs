//! Grad-CAM maps of a pretrained caption model: for a few test images, the
//! map of each mentioned attribute phrase and its mass inside that
//! attribute's body region. Expects a run directory produced by the
//! `pretrain` example.
//!
//! ```text
//! cargo run --release --example saliency -- runs/pretrain
//! ```

use vtbr::config::RunConfig;
use vtbr::pipeline::{load_caption_model, phrase_positions, record_saliency, DomainData, RunDir};
use vtbr::scene::category_regions;

fn main() -> vtbr::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "runs/pretrain".into());
    let run = RunDir { root: root.into() };
    let config = RunConfig::toy();
    let (model, vocab) = load_caption_model(&run.ckpt("pretrain.ckpt"))?;
    let data = DomainData::load(&run.manifest("a"))?;
    let regions = category_regions(&data.schema, &config.render);
    for r in data.manifest.query.iter().take(4) {
        let record = &data.records[r.record];
        let caption = &data.captions[r.record];
        let image = data.image(r)?;
        println!(
            "identity {} camera {}: {}",
            record.identity_id,
            record.camera_id,
            caption.text()
        );
        let whole = record_saliency(&model, &vocab, record, caption, &image, None)?;
        println!("  whole caption: peak {:.2}", whole.max());
        let tokens = vocab.encode(caption);
        for (category, rect) in &regions {
            let value = record.value(category).unwrap_or_default();
            if phrase_positions(&tokens, &vocab.encode_phrase(value)).is_none() {
                continue;
            }
            let map = record_saliency(&model, &vocab, record, caption, &image, Some(category))?;
            println!(
                "  {category:<13} `{value}`: region/complement {:.2}",
                map.region_ratio(*rect)
            );
        }
    }
    Ok(())
}
