//! End-to-end runs of the stage sequence on a shrunken toy configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use vtbr::captions::Vocabulary;
use vtbr::checkpoint::load_checkpoint;
use vtbr::pipeline::{load_domains, run_pipeline, DomainData};
use vtbr::Error;

mod common;

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_directory_holds_every_artifact_with_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::small_config(&dir.path().join("run"), 3);
    let outcome = run_pipeline(&config).unwrap();
    let run = &outcome.run;
    let hash = config.hash();

    for rel in [
        "config.json",
        "captions/index.json",
        "captions/vocab.json",
        "captions/schema.json",
        "images/a/manifest.json",
        "images/b/manifest.json",
        "ckpt/pretrain.ckpt",
        "ckpt/finetune.ckpt",
        "logs/pretrain.jsonl",
        "logs/finetune.jsonl",
        "reports/captions.json",
        "reports/pretrain.json",
        "reports/eval_a_a.json",
        "reports/eval_a_b.json",
        "reports/saliency/index.json",
    ] {
        assert!(run.root.join(rel).is_file(), "missing {rel}");
    }

    // JSON reports carry lineage inline, other files through sidecars
    for rel in [
        "reports/eval_a_a.json",
        "reports/eval_a_b.json",
        "reports/pretrain.json",
    ] {
        assert_eq!(
            json(&run.root.join(rel))["lineage"]["config_hash"],
            hash.as_str(),
            "{rel}"
        );
    }
    let sidecar = json(&run.root.join("captions/vocab.json.lineage.json"));
    assert_eq!(sidecar["config_hash"], hash.as_str());
    assert_eq!(sidecar["seed"], 3);
    let (_, meta) = load_checkpoint(&run.ckpt("finetune.ckpt")).unwrap();
    assert_eq!(meta.config_hash, hash);
    assert_eq!(meta.stage, "finetune");

    // one saliency map per exported identity, each of image size
    assert_eq!(outcome.saliency.len(), 2);
    for e in &outcome.saliency {
        let bytes = fs::read(run.reports().join("saliency").join(&e.file)).unwrap();
        assert!(bytes.starts_with(b"P5\n32 64\n255\n"));
    }

    // the pretraining log has one line per step
    let log = fs::read_to_string(run.logs().join("pretrain.jsonl")).unwrap();
    assert_eq!(log.lines().count(), config.pretrain.total_steps);

    assert_eq!(outcome.reports.len(), 2);
    for r in &outcome.reports {
        assert!(r.map > 0.0 && r.map <= 1.0);
        assert_eq!(r.protocol.train_domain, "a");
    }
    let vocab = Vocabulary::load(&run.captions().join("vocab.json")).unwrap();
    assert_eq!(outcome.pretrain.vocab_size, vocab.len());
}

#[test]
fn identity_roles_are_disjoint_in_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::small_config(&dir.path().join("run"), 0);
    let outcome = run_pipeline(&config).unwrap();
    for data in load_domains(&outcome.run).unwrap() {
        let m = &data.manifest;
        let pre = m.pretrain_identities(&data.records);
        let train = m.train_identities(&data.records);
        let test = m.test_identities(&data.records);
        assert!(!pre.is_empty() && !train.is_empty() && !test.is_empty());
        assert!(pre.is_disjoint(&train) && pre.is_disjoint(&test) && train.is_disjoint(&test));
        // every query identity appears under another camera in the gallery
        for q in &m.query {
            let rq = &data.records[q.record];
            assert!(m.gallery.iter().any(|g| {
                let rg = &data.records[g.record];
                rg.identity_id == rq.identity_id && rg.camera_id != rq.camera_id
            }));
        }
        // pretraining captions come from pretraining identities only
        let vocab = Vocabulary::load(&outcome.run.captions().join("vocab.json")).unwrap();
        let pairs = data.caption_pairs(&vocab, false).unwrap();
        assert_eq!(pairs.len(), m.pretrain.len());
    }
}

#[test]
fn same_seed_reproduces_bytes_and_another_seed_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = [("one", 5), ("two", 5), ("three", 6)]
        .iter()
        .map(|(name, seed)| run_pipeline(&common::small_config(&dir.path().join(name), *seed)).unwrap())
        .collect();
    let (a, b, c) = (&runs[0].run.root, &runs[1].run.root, &runs[2].run.root);
    let files = files_under(a);
    assert_eq!(files, files_under(b));
    for f in &files {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{}",
            f.display()
        );
    }
    assert_ne!(
        fs::read(a.join("ckpt/pretrain.ckpt")).unwrap(),
        fs::read(c.join("ckpt/pretrain.ckpt")).unwrap()
    );
}

#[test]
fn manifests_are_relocatable() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::small_config(&dir.path().join("run"), 1);
    run_pipeline(&config).unwrap();
    let moved = dir.path().join("moved");
    fs::rename(dir.path().join("run"), &moved).unwrap();
    let data = DomainData::load(&moved.join("images/b/manifest.json")).unwrap();
    let ids: BTreeSet<u64> = data
        .manifest
        .query
        .iter()
        .map(|r| data.records[r.record].identity_id)
        .collect();
    assert!(!ids.is_empty());
    data.image(&data.manifest.query[0]).unwrap();
}

#[test]
fn invalid_config_fails_in_the_config_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::small_config(&dir.path().join("run"), 0);
    config.captions.alpha = 1.5;
    match run_pipeline(&config) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "config");
            assert!(matches!(*source, Error::Config { ref field, .. } if field == "captions.alpha"));
        }
        other => panic!("expected a config stage failure, got {other:?}"),
    }
    assert!(!dir.path().join("run").exists());
}
