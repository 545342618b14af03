//! End-to-end runs of the `weedshift` binary.

mod support;

use std::path::Path;

use support::*;
use weedshift::corpus::DatasetDir;
use weedshift::data::{DomainDataset, Split};
use weedshift::eval::{median, MetricsReport};
use weedshift::tiling::SplitManifest;

#[test]
fn tile_matches_the_golden_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, images) = tile_fixture(dir.path());
    let out = dir.path().join("tiles");
    let run = ok(&["tile", "--annotations", s(&ann), "--images", s(&images), "--out", s(&out), "--domain", "fieldA"]);
    let golden = include_str!("golden/tile_manifest.csv");
    assert_eq!(String::from_utf8(read(&out.join("manifest.csv"))).unwrap(), golden);
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("0 background, 4 positive, 4 unclear"), "{stdout}");
    let plants = String::from_utf8(read(&out.join("plants.csv"))).unwrap();
    assert_eq!(plants.lines().count(), 1 + 8);
}

#[test]
fn tile_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, images) = tile_fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["tile", "--annotations", s(&ann), "--images", s(&images), "--out", s(out), "--jobs", "2"]);
    }
    for f in ["manifest.csv", "features.csv", "plants.csv", "config.toml"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
}

#[test]
fn empty_annotations_give_background_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let (_, images) = tile_fixture(dir.path());
    let ann = dir.path().join("empty.csv");
    std::fs::write(&ann, ANNOTATION_HEADER).unwrap();
    let out = dir.path().join("tiles");
    ok(&["tile", "--annotations", s(&ann), "--images", s(&images), "--out", s(&out)]);
    let m = SplitManifest::load(&out.join("manifest.csv")).unwrap();
    assert_eq!(m.records.len(), 8);
    assert!(m.records.iter().all(|r| r.tile.label == 0 && r.tile.r == 0.0));
}

#[test]
fn a_broken_raster_fails_the_run_but_not_the_other_images() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, images) = tile_fixture(dir.path());
    std::fs::write(images.join("broken.pgm"), b"P5\n10 10\n255\nshort").unwrap();
    let out = dir.path().join("tiles");
    let run = weedshift(&["tile", "--annotations", s(&ann), "--images", s(&images), "--out", s(&out)]);
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("broken"));
    let m = SplitManifest::load(&out.join("manifest.csv")).unwrap();
    assert_eq!(m.records.len(), 8);
}

#[test]
fn split_assigns_every_tile() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, images) = multi_image_fixture(dir.path());
    let tiles = dir.path().join("tiles");
    ok(&["tile", "--annotations", s(&ann), "--images", s(&images), "--out", s(&tiles)]);
    let split = dir.path().join("split");
    ok(&["split", "--input", s(&tiles), "--out", s(&split), "--val-fraction", "0.34", "--seed", "3"]);
    let data = DatasetDir::load(&split).unwrap();
    assert!(data.manifest.records.iter().all(|r| matches!(r.split, Split::Train | Split::Val)));
    assert!(data.manifest.records.iter().any(|r| r.split == Split::Val));
    // Tiles of one image share a plant or image group, so never straddle splits.
    for r in &data.manifest.records {
        let same: Vec<_> = data.manifest.records.iter().filter(|o| o.tile.image_id == r.tile.image_id).collect();
        assert!(same.iter().all(|o| o.split == r.split));
    }
}

#[test]
fn vanilla_training_writes_a_history_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_fixture(dir.path(), 0);
    let run = dir.path().join("run");
    ok_owned(&train_args(s(&synth), s(&run), "vanilla"));
    let history = String::from_utf8(read(&run.join("history.jsonl"))).unwrap();
    assert_eq!(history.lines().count(), 3);
    for f in ["checkpoint.json", "config.toml", "report.txt", "metrics.json", "plot.jsonl", "steps.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
}

#[test]
fn training_reruns_and_config_replays_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_fixture(dir.path(), 1);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok_owned(&train_args(s(&synth), s(&a), "m3sda_beta"));
    ok_owned(&train_args(s(&synth), s(&b), "m3sda_beta"));
    let source = synth.join("source");
    let target = synth.join("target");
    ok(&[
        "--config", s(&a.join("config.toml")), "train", "--source", s(&source), "--target", s(&target), "--out", s(&c),
    ]);
    for f in ["checkpoint.json", "history.jsonl", "steps.jsonl", "report.txt", "metrics.json", "config.toml"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "rerun {f}");
        assert_eq!(read(&a.join(f)), read(&c.join(f)), "replay {f}");
    }
}

fn single_source(dir: &Path, synth: &Path) -> std::path::PathBuf {
    let data = DatasetDir::load(&synth.join("source")).unwrap();
    let grouped = data.datasets().unwrap();
    let train = &grouped[&("source0".to_string(), Split::Train)];
    let val = &grouped[&("source0".to_string(), Split::Val)];
    let out = dir.join("one");
    DatasetDir::from_datasets(&[(train, Split::Train), (val, Split::Val)])
        .unwrap()
        .save(&out)
        .unwrap();
    out
}

#[test]
fn m3sda_with_one_source_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_fixture(dir.path(), 0);
    let one = single_source(dir.path(), &synth);
    let target = synth.join("target");
    let run = dir.path().join("run");
    let out = weedshift(&[
        "train", "--source", s(&one), "--target", s(&target), "--out", s(&run), "--strategy", "m3sda_beta",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("at least 2 source domains"), "{err}");
    assert!(!run.exists());
}

#[test]
fn adaptation_without_a_target_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_fixture(dir.path(), 0);
    let source = synth.join("source");
    let run = dir.path().join("run");
    for strategy in ["m2s2da", "m3sda_beta"] {
        let out = weedshift(&["train", "--source", s(&source), "--out", s(&run), "--strategy", strategy]);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("--target"));
    }
    assert!(!run.exists());
}

#[test]
fn eval_reports_both_dimensions_on_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_fixture(dir.path(), 0);
    let run = dir.path().join("run");
    ok_owned(&train_args(s(&synth), s(&run), "vanilla"));
    let (ann, images) = tile_fixture(dir.path());
    let tiles = dir.path().join("tiles");
    ok(&["tile", "--annotations", s(&ann), "--images", s(&images), "--out", s(&tiles)]);
    let out = weedshift(&[
        "eval", "--checkpoint", s(&run.join("checkpoint.json")), "--target", s(&tiles), "--out", s(&dir.path().join("e")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let tile_dim = DatasetDir::load(&tiles).unwrap().features.dim;
    assert!(err.contains(&format!("{tile_dim}-dimensional")) && err.contains("expects 16"), "{err}");
}

#[test]
fn eval_excludes_flights_without_positives() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_fixture(dir.path(), 2);
    let run = dir.path().join("run");
    ok_owned(&train_args(s(&synth), s(&run), "vanilla"));

    let target = DatasetDir::load(&synth.join("target")).unwrap().by_domain().unwrap().remove(0);
    let pick = |label: u8, n: usize| -> (Vec<f64>, Vec<u8>) {
        let rows: Vec<usize> = (0..target.len()).filter(|&i| target.labels[i] == label).take(n).collect();
        (rows.iter().flat_map(|&i| target.row(i).to_vec()).collect(), vec![label; rows.len()])
    };
    let mixed = DomainDataset::new("flight1", target.dim, target.features[..100 * target.dim].to_vec(), target.labels[..100].to_vec()).unwrap();
    let (f, l) = pick(0, 40);
    let napf = DomainDataset::new("napf", target.dim, f, l).unwrap();
    let flights = dir.path().join("flights");
    DatasetDir::from_datasets(&[(&mixed, Split::Test), (&napf, Split::Test)])
        .unwrap()
        .save(&flights)
        .unwrap();

    let out = dir.path().join("eval");
    let printed = ok(&["eval", "--checkpoint", s(&run.join("checkpoint.json")), "--target", s(&flights), "--out", s(&out)]);
    let report: MetricsReport = serde_json::from_slice(&read(&out.join("metrics.json"))).unwrap();
    assert!(report.per_subdomain["napf"].excluded);
    assert!(!report.per_subdomain["flight1"].excluded);
    assert_eq!(report.aggregates.unwrap().flights, 1);
    let table = String::from_utf8_lossy(&printed.stdout);
    let napf_line = table.lines().find(|l| l.starts_with("napf")).unwrap();
    assert!(napf_line.contains("excluded"), "{table}");

    // Recompute the median from the plot records.
    let plot = String::from_utf8(read(&out.join("plot.jsonl"))).unwrap();
    let f1: Vec<f64> = plot
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| !v["excluded"].as_bool().unwrap())
        .map(|v| v["f1"].as_f64().unwrap())
        .collect();
    assert_eq!(median(&f1), report.median_f1());
}
