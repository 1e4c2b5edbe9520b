//! Synthetic corpus and helpers shared by the binary-level tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

pub const N_IMAGES: u32 = 24;

pub const CONFIG: &str = r#"
seed = 7

[paths]
corpus = "corpus"
ratings = "ratings.csv"
work = "work"

[curation.geometry]
ratio = 1.5
ratio_tol = 0.1
min_width = 40
min_height = 24

[split]
ref_lo = 1.0
ref_hi = 7.0
beauty = { ref_n = 8, ref_train = 5, input_train = 10 }
happy = { ref_n = 8, ref_train = 5, input_train = 10 }

[retrieval.backbone]
in_channels = 3
channels = [4]
kernel = 3
stride = 2

[retrieval.geometry]
resize_short = 16
crop = 16
patch = 8

[model]
difference_hidden = 8

[model.backbone]
in_channels = 3
channels = [4, 8]
kernel = 3
stride = 2

[model.geometry]
resize_short = 16
crop = 16
patch = 8

[train]
validation_fraction = 0.2

[train.global]
epochs = 2
batch_size = 4
learning_rate = 0.001

[train.local]
epochs = 2
batch_size = 4
learning_rate = 0.001

[train.emotion]
epochs = 2
batch_size = 4
learning_rate = 0.001
"#;

pub fn scenic(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenic"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = scenic(dir, args);
    assert!(
        out.status.success(),
        "scenic {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn image(i: u32) -> RgbImage {
    // each image gets its own colour blocks so colour histograms stay apart
    let a = [(i * 37 % 8) as u8 * 32 + 8, (i * 5 % 8) as u8 * 32 + 8, (i % 8) as u8 * 32 + 8];
    let b = [(i / 8) as u8 * 64 + 16, (i * 3 % 8) as u8 * 32 + 8, 255 - (i * 11 % 8) as u8 * 32];
    RgbImage::from_fn(48, 32, |x, y| {
        let c = if x < 16 + i % 16 { a } else { b };
        Rgb([c[0].saturating_add((y % 4) as u8), c[1], c[2]])
    })
}

/// Corpus, rating table and config. `img_99.png` duplicates `img_00.png` and
/// `small.png` is too small; both must be dropped by curation.
pub fn fixture(dir: &Path) {
    let corpus = dir.join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    for i in 0..N_IMAGES {
        image(i).save(corpus.join(format!("img_{i:02}.png"))).unwrap();
    }
    fs::copy(corpus.join("img_00.png"), corpus.join("img_99.png")).unwrap();
    RgbImage::from_pixel(15, 10, Rgb([1, 2, 3])).save(corpus.join("small.png")).unwrap();

    let mut csv = String::from("image_id,rater_id,beauty,happy,dwell_seconds\n");
    for i in 0..N_IMAGES {
        let beauty = 1 + i % 7;
        let happy = 1 + (i * 3 + 1) % 7;
        for r in 0..6u32 {
            let jitter = |v: u32| (v as i32 + [0, 1, -1, 0, 1, -1][r as usize]).clamp(1, 7);
            csv.push_str(&format!(
                "img_{i:02}.png,rater{r},{},{},{}\n",
                jitter(beauty),
                jitter(happy),
                3 + r
            ));
        }
    }
    csv.push_str("img_00.png,rater9,9,4,3\n");
    fs::write(dir.join("ratings.csv"), csv).unwrap();
    fs::write(dir.join("scenic.toml"), CONFIG).unwrap();
}

pub fn run_pipeline(dir: &Path) {
    let c = ["--config", "scenic.toml"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| {
        let args = with(rest);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(dir, &refs)
    };
    run(&["curate"]);
    run(&["ingest"]);
    run(&["clean"]);
    run(&["stats"]);
    for dim in ["beauty", "happy"] {
        run(&["split", "--dimension", dim]);
        run(&["index", "--dimension", dim]);
        for stage in ["1", "2", "3"] {
            run(&["train", "--stage", stage, "--dimension", dim]);
        }
    }
    run(&["evaluate", "--dimension", "beauty"]);
    run(&["score", "--dimension", "beauty", "corpus/img_03.png", "corpus/img_04.png"]);
    run(&["rank", "corpus", "--k", "5", "--combine", "both"]);
}

/// Every file under `root`, keyed by relative path. Run manifests lose
/// their timestamp, the one field allowed to differ.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let mut bytes = fs::read(&path).unwrap();
            if path.to_string_lossy().ends_with(".run.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("created_unix").expect("manifest has a timestamp");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

