use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use reweight_cli::{commands, imageio, manifest, weights, Cli, CliError, RunConfig};
use reweight_core::colorlib::{self, Illuminant};
use reweight_core::network::{build_network, NetworkSpec};

const SMALL: &str = "gen_count = 6\ngen_width = 48\ngen_height = 36\n\
training_count = 6\nvalidation_count = 3\nepochs = 1\nbatch_size = 3\ninput_size = 16\n";

fn run(args: &[&str]) -> Result<String, CliError> {
    let cli = Cli::try_parse_from(std::iter::once("reweight").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    reweight_cli::run(&cli, Vec::new(), &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("data");
    run(&["gen", "--config", s(&cfg), "--out", s(&out), "--seed", "4"]).unwrap();
    let data = manifest::load_dataset(&out.join("manifest.csv"), None).unwrap();
    assert_eq!(data.len(), 6);
    assert_eq!(data[0].pixels.shape(), &[36, 48, 3]);
    // 16-bit quantization is the only loss
    let reference = reweight_core::datagen::generate_dataset(
        &RunConfig::load(Some(&cfg), Vec::new()).unwrap().dataset_config(48, 36),
        4,
        6,
    )
    .unwrap();
    let diff = data[3].pixels.max_abs_diff(&reference[3].pixels).unwrap();
    assert!(diff <= 0.5 / 65535.0 + 1e-15, "{diff}");
    let e = colorlib::angular_error(data[3].illuminant.rgb(), reference[3].illuminant.rgb()).unwrap();
    assert!(e < 1e-6);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("data");
    run(&["gen", "--config", s(&cfg), "--out", s(&out)]).unwrap();
    let before = std::fs::read(out.join("manifest.csv")).unwrap();
    match run(&["gen", "--config", s(&cfg), "--out", s(&out), "--seed", "9"]) {
        Err(CliError::WouldOverwrite(p)) => assert!(p.ends_with("manifest.csv") || p.ends_with("images")),
        other => panic!("{other:?}"),
    }
    assert_eq!(std::fs::read(out.join("manifest.csv")).unwrap(), before);
    run(&["gen", "--config", s(&cfg), "--out", s(&out), "--seed", "9", "--force"]).unwrap();
    assert_ne!(std::fs::read(out.join("manifest.csv")).unwrap(), before);
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run(&["train", "--config", s(&cfg), "--out", s(out), "--seed", "3", "--confidence", "on"]).unwrap();
    }
    let wa = std::fs::read(a.join("weights.rwcc")).unwrap();
    assert_eq!(wa, std::fs::read(b.join("weights.rwcc")).unwrap());
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
    let w = weights::load_weights(&a.join("weights.rwcc")).unwrap();
    assert!(w.spec().with_confidence_branch);
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("phase,epoch,step,loss,task_loss,reg_loss,lambda,learning_rate,val_mean"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn eval_statistics_match_the_logged_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    run(&["gen", "--config", s(&cfg), "--out", s(&data), "--seed", "5"]).unwrap();
    let w = dir.path().join("w.rwcc");
    weights::save_weights(&build_network(&NetworkSpec::new(1, true).unwrap(), 2).unwrap(), &w).unwrap();
    let res = dir.path().join("res");
    let table = run(&[
        "eval",
        "--config",
        s(&cfg),
        "--weights",
        s(&w),
        "--manifest",
        s(&data.join("manifest.csv")),
        "--out",
        s(&res),
        "--workers",
        "2",
    ])
    .unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");
    for m in ["network", "gray-world", "white-patch", "shades-of-gray"] {
        assert!(table.contains(m));
    }
    let mut rd = csv::Reader::from_path(res.join("eval.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let errs: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let gw: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let stats = colorlib::error_stats(&errs).unwrap();
    let gws = colorlib::error_stats(&gw).unwrap();
    assert!(gws.worst25 > gws.best25);
    let mut rd = csv::Reader::from_path(res.join("summary.csv")).unwrap();
    let first = rd.records().next().unwrap().unwrap();
    assert_eq!(&first[0], "network");
    assert_eq!(first[1].parse::<f64>().unwrap(), stats.mean);
    assert_eq!(first[2].parse::<f64>().unwrap(), stats.median);
    assert_eq!(first[5].parse::<f64>().unwrap(), stats.worst25);
}

#[test]
fn eval_of_a_perfect_estimator_prints_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let cfg = RunConfig::load(Some(&cfg_path), Vec::new()).unwrap();
    let net = build_network(&NetworkSpec::new(1, false).unwrap().with_input_size(16), 8).unwrap();
    let w = dir.path().join("w.rwcc");
    weights::save_weights(&net, &w).unwrap();
    // ground truth := the network's own answer on each image
    let imgs = reweight_core::datagen::generate_dataset(&cfg.dataset_config(48, 36), 1, 4).unwrap();
    let mut records = Vec::new();
    for (i, img) in imgs.iter().enumerate() {
        let name = format!("{i}.ppm");
        imageio::write_ppm16(&dir.path().join(&name), &img.pixels).unwrap();
        let reread = manifest::load_dataset(&write_one(dir.path(), &name), None).unwrap().remove(0);
        let r = commands::estimate(&net, &reread, cfg.eval_patches, None).unwrap();
        records.push(manifest::ManifestRecord::new(name, &r.global));
    }
    let m = dir.path().join("m.csv");
    manifest::write_manifest(&m, &records).unwrap();
    let table = run(&["eval", "--config", s(&cfg_path), "--weights", s(&w), "--manifest", s(&m)]).unwrap();
    let row = table.lines().nth(1).unwrap();
    assert!(row.starts_with("network"));
    assert_eq!(row.split_whitespace().skip(1).collect::<Vec<_>>(), ["0.00"; 5], "{table}");
}

fn write_one(dir: &Path, name: &str) -> PathBuf {
    let p = dir.join("one.csv");
    manifest::write_manifest(&p, &[manifest::ManifestRecord::new(name, &Illuminant::NEUTRAL)]).unwrap();
    p
}

#[test]
fn infer_and_inspect_emit_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    run(&["gen", "--config", s(&cfg), "--out", s(&data)]).unwrap();
    let w = dir.path().join("w.rwcc");
    weights::save_weights(&build_network(&NetworkSpec::new(2, true).unwrap(), 2).unwrap(), &w).unwrap();
    let image = data.join("images/00001.ppm");

    let json = run(&["infer", "--config", s(&cfg), "--weights", s(&w), s(&image)]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["per_patch"].as_array().unwrap().len(), 12);
    let sum: f64 = v["global"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-12);
    assert!(v["angular_error"].is_null());

    let corrected = dir.path().join("c.ppm");
    let out = dir.path().join("inf");
    run(&[
        "infer", "--config", s(&cfg), "--weights", s(&w), s(&image), "--out", s(&out), "--corrected", s(&corrected),
    ])
    .unwrap();
    let from_file: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("estimate.json")).unwrap()).unwrap();
    assert_eq!(from_file, v);
    assert_eq!(imageio::read_image(&corrected).unwrap().shape(), &[36, 48, 3]);

    let insp = dir.path().join("insp");
    run(&[
        "inspect",
        "--config",
        s(&cfg),
        "--weights",
        s(&w),
        s(&image),
        "--manifest",
        s(&data.join("manifest.csv")),
        "--out",
        s(&insp),
    ])
    .unwrap();
    for l in 0..3 {
        let map = imageio::read_image(&insp.join(format!("rewu{l}.png"))).unwrap();
        assert_eq!(map.shape()[2], 3);
    }
    let scatter = std::fs::read_to_string(insp.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().next().unwrap(), "source,grid_index,confidence,angular_error");
    assert_eq!(scatter.lines().count(), 1 + 6 * 12);
}

#[test]
fn flags_override_environment_which_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cli = Cli::try_parse_from(["reweight", "--config", s(&cfg), "--seed", "5", "gen"]).unwrap();
    let env = vec![
        ("REWEIGHT_SEED".to_string(), "4".to_string()),
        ("REWEIGHT_EPOCHS".to_string(), "9".to_string()),
    ];
    let rc = cli.run_config(env).unwrap();
    assert_eq!(rc.seed, 5);
    assert_eq!(rc.epochs, 9);
    assert_eq!(rc.gen_count, 6);
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_reweight");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "hierarchy = 7\n").unwrap();
    let weights = dir.path().join("nothing.rwcc");
    std::fs::write(&weights, b"JUNKJUNKJUNK").unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["gen".into(), "--config".into(), s(&bad).into(), "--out".into(), s(dir.path()).into()],
        vec!["gen".into()],
        vec!["infer".into(), "--weights".into(), s(&weights).into(), "x.ppm".into()],
    ];
    for args in cases {
        let out = Command::new(bin).args(&args).env_remove("REWEIGHT_SEED").output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "));
    }
}
