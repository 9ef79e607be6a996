//! The `vtbr` command line driven through [`vtbr::cli::dispatch`].

use std::fs;
use std::path::Path;

use vtbr::cli::dispatch;
use vtbr::pipeline::DomainData;

mod common;

fn vtbr(args: &[&str]) -> i32 {
    dispatch(std::iter::once("vtbr").chain(args.iter().copied()))
}

fn write_config(dir: &Path, seed: u64) -> String {
    let config = common::small_config(&dir.join("unused"), seed);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(vtbr(&[]), 2);
    assert_eq!(vtbr(&["no-such-command"]), 2);
    assert_eq!(vtbr(&["finetune", "--init", "random"]), 2);
    assert_eq!(vtbr(&["eval", "--model", "m", "--data", "d", "--saliency", "1"]), 2);
    assert_eq!(vtbr(&["pipeline", "--seed", "minus-one"]), 2);
    assert_eq!(vtbr(&["--help"]), 0);
}

#[test]
fn stage_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(
        vtbr(&["gen-captions", "--config", "/no/such/config.json", "--out", out]),
        1
    );

    let mut config = common::small_config(&dir.path().join("unused"), 0);
    config.captions.alpha = 2.0;
    let bad = dir.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&config).unwrap()).unwrap();
    assert_eq!(vtbr(&["pipeline", "--config", bad.to_str().unwrap(), "--out", out]), 1);

    fs::write(&bad, r#"{"seed": 0, "colour": "blue"}"#).unwrap();
    assert_eq!(vtbr(&["pipeline", "--config", bad.to_str().unwrap(), "--out", out]), 1);

    assert_eq!(
        vtbr(&["eval", "--model", "/no/such.ckpt", "--data", "/no/manifest.json"]),
        1
    );
}

#[test]
fn stages_chain_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 2);
    let run = dir.path().join("run");
    let out = run.to_str().unwrap();
    for stage in ["gen-captions", "synth-data", "pretrain"] {
        assert_eq!(vtbr(&[stage, "--config", &config, "--out", out]), 0, "{stage}");
    }
    let pre = run.join("ckpt/pretrain.ckpt");
    assert!(pre.is_file());
    let manifest_a = run.join("images/a/manifest.json");
    let manifest_b = run.join("images/b/manifest.json");

    let ft = dir.path().join("ft");
    assert_eq!(
        vtbr(&[
            "finetune",
            "--config",
            &config,
            "--out",
            ft.to_str().unwrap(),
            "--init",
            pre.to_str().unwrap(),
            "--data",
            manifest_a.to_str().unwrap(),
        ]),
        0
    );
    let model = ft.join("finetune.ckpt");
    assert!(model.is_file());

    let data = DomainData::load(&manifest_a).unwrap();
    let id = data.records[data.manifest.query[0].record].identity_id.to_string();
    let reports = dir.path().join("reports");
    assert_eq!(
        vtbr(&[
            "eval",
            "--model",
            model.to_str().unwrap(),
            "--data",
            manifest_a.to_str().unwrap(),
            "--cross-domain",
            manifest_b.to_str().unwrap(),
            "--saliency",
            &id,
            "--caption-model",
            pre.to_str().unwrap(),
            "--out",
            reports.to_str().unwrap(),
        ]),
        0
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("eval_a_b.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"]["init"], "vtbr");
    assert!(reports.join("saliency/index.json").is_file());

    let maps = dir.path().join("maps");
    assert_eq!(
        vtbr(&[
            "saliency",
            "--model",
            pre.to_str().unwrap(),
            "--data",
            manifest_a.to_str().unwrap(),
            "--ids",
            &id,
            "--attribute",
            "hair",
            "--out",
            maps.to_str().unwrap(),
        ]),
        0
    );
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(maps.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["maps"][0]["attribute"], "hair");
    assert_eq!(
        vtbr(&[
            "saliency",
            "--model",
            pre.to_str().unwrap(),
            "--data",
            manifest_a.to_str().unwrap(),
            "--ids",
            "999999",
            "--out",
            maps.to_str().unwrap(),
        ]),
        1
    );
}

#[test]
fn random_init_finetune_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 4);
    let run = dir.path().join("run");
    let out = run.to_str().unwrap();
    assert_eq!(vtbr(&["gen-captions", "--config", &config, "--out", out]), 0);
    assert_eq!(vtbr(&["synth-data", "--config", &config, "--out", out]), 0);
    let manifest = run.join("images/a/manifest.json");
    let ft = dir.path().join("ft");
    let args = [
        "finetune",
        "--config",
        &config,
        "--out",
        ft.to_str().unwrap(),
        "--init",
        "random",
        "--data",
        manifest.to_str().unwrap(),
    ];
    assert_eq!(vtbr(&args), 0);
    let (_, meta) = vtbr::checkpoint::load_checkpoint(&ft.join("finetune.ckpt")).unwrap();
    assert_eq!(meta.extra["init"], "random");
}
