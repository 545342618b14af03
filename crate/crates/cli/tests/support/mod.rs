//! Helpers for driving the `weedshift` binary.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn weedshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weedshift"))
        .args(args)
        .env_remove("WEEDSHIFT_OUT")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) -> Output {
    let out = weedshift(args);
    assert!(
        out.status.success(),
        "weedshift {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Binary greyscale PGM of the given size with seeded noise.
pub fn write_pgm(path: &Path, width: usize, height: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend((0..width * height).map(|_| rng.random::<u8>()));
    std::fs::write(path, bytes).unwrap();
}

pub const ANNOTATION_HEADER: &str = "image_id,x_min,y_min,x_max,y_max,class,plant_id\n";

/// One 1100×700 image `field1` with a single 200×300 box.
pub fn tile_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).unwrap();
    write_pgm(&images.join("field1.pgm"), 1100, 700, 1);
    let ann = dir.join("boxes.csv");
    std::fs::write(&ann, format!("{ANNOTATION_HEADER}field1,450,100,650,400,rumex,p1\n")).unwrap();
    (ann, images)
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A small synthetic benchmark written by `weedshift synth`.
pub fn synth_fixture(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join("synth");
    ok(&["synth", "--out", s(&out), "--seed", &seed.to_string(), "--n-samples", "300"]);
    out
}

pub fn train_args<'a>(synth: &'a str, out: &'a str, strategy: &'a str) -> Vec<String> {
    [
        "train", "--source", &format!("{synth}/source"), "--target", &format!("{synth}/target"), "--out", out,
        "--strategy", strategy, "--epochs", "3", "--warmup", "1", "--seed", "7",
    ]
    .iter()
    .map(|a| a.to_string())
    .collect()
}

pub fn ok_owned(args: &[String]) -> Output {
    let a: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&a)
}

/// Six 600×600 images, one plant each.
pub fn multi_image_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let images = dir.join("images6");
    std::fs::create_dir_all(&images).unwrap();
    let mut boxes = String::from(ANNOTATION_HEADER);
    for i in 0..6 {
        write_pgm(&images.join(format!("img{i}.pgm")), 600, 600, i);
        boxes.push_str(&format!("img{i},10,10,300,300,rumex,plant{i}\n"));
    }
    let ann = dir.join("boxes6.csv");
    std::fs::write(&ann, boxes).unwrap();
    (ann, images)
}
