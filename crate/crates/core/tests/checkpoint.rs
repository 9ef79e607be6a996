//! Handing a pretrained backbone from the caption model to the retrieval model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vtbr::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use vtbr::finetune::ReidModel;
use vtbr::model::CaptionModel;

mod common;

fn meta(model: &CaptionModel) -> CheckpointMeta {
    CheckpointMeta {
        stage: "pretrain".into(),
        step: 10,
        seed: 1,
        config_hash: "test".into(),
        model: model.config.clone(),
        extra: serde_json::json!({ "note": "fixture" }),
    }
}

#[test]
fn backbone_transfers_exactly_and_heads_start_fresh() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    let caption = CaptionModel::new(common::tiny_model(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    save_checkpoint(&caption.params, &meta(&caption), &path).unwrap();
    let (stored, read_meta) = load_checkpoint(&path).unwrap();
    assert_eq!(read_meta, meta(&caption));
    // parameters are f32-representable, so the round trip is lossless
    assert_eq!(stored, caption.params);

    let fresh = ReidModel::new(common::tiny_model(), 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut reid = fresh.clone();
    reid.load_backbone(&stored).unwrap();
    for e in reid.params.entries() {
        if e.name.starts_with("visual.") {
            let src = stored.get(stored.id(&e.name).unwrap());
            assert_eq!(&e.value, src, "{}", e.name);
        } else {
            let before = fresh.params.get(fresh.params.id(&e.name).unwrap());
            assert_eq!(&e.value, before, "{} should keep its fresh value", e.name);
        }
    }
    assert!(reid.params.id("head.w").is_some());
    assert!(reid
        .params
        .entries()
        .iter()
        .all(|e| !e.name.starts_with("fwd.") && !e.name.starts_with("text.")));
}

#[test]
fn mismatched_backbone_is_rejected() {
    let caption = CaptionModel::new(common::tiny_model(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut wider = common::tiny_model();
    wider.stage_channels = vec![10];
    let mut reid = ReidModel::new(wider, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(matches!(
        reid.load_backbone(&caption.params),
        Err(vtbr::Error::Dimension(_))
    ));
}

#[test]
fn reloaded_retrieval_model_embeds_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reid.ckpt");
    let reid = ReidModel::new(common::tiny_model(), 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let m = CheckpointMeta {
        stage: "finetune".into(),
        step: 0,
        seed: 2,
        config_hash: "test".into(),
        model: reid.config.clone(),
        extra: serde_json::Value::Null,
    };
    save_checkpoint(&reid.params, &m, &path).unwrap();
    let (stored, meta) = load_checkpoint(&path).unwrap();
    let back = ReidModel::from_params(meta.model, &stored).unwrap();
    assert_eq!(back.classes(), 4);
    let image = vtbr::tape::Mat::from_shape_fn((3, 16 * 8), |(c, i)| ((c * 31 + i * 7) % 17) as f64 / 17.0);
    assert_eq!(reid.embed(&image).unwrap(), back.embed(&image).unwrap());
}
