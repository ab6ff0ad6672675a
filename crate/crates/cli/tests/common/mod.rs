#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use smokeforge::corpus::{BinaryMask, Manifest, SmokeSample, Source, Split};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smokeforge"))
}

/// Runs the binary in `dir`.
pub fn sf(dir: &Path, args: &[&str]) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stdout);
    let line = text
        .lines()
        .last()
        .unwrap_or_else(|| panic!("no output; stderr: {}", stderr(o)));
    serde_json::from_str(line).unwrap()
}

pub fn picture(w: u32, h: u32, seed: u8) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            (x as u8).wrapping_mul(13).wrapping_add(seed),
            (y as u8).wrapping_mul(7).wrapping_add(seed / 2),
            90u8.wrapping_add(seed),
        ])
    })
}

/// `n` PNG images with rectangular masks, plus their manifest, in `dir`.
/// Every third record has no mask.
pub fn masked_set(dir: &Path, n: usize, w: usize, h: usize) -> (PathBuf, Manifest) {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    std::fs::create_dir_all(dir.join("mask")).unwrap();
    let mut records = Vec::new();
    for i in 0..n {
        let id = format!("s{i:02}");
        let image_path = PathBuf::from("img").join(format!("{id}.png"));
        picture(w as u32, h as u32, i as u8 * 17)
            .save(dir.join(&image_path))
            .unwrap();
        let mask_path = (i % 3 != 2).then(|| {
            let p = PathBuf::from("mask").join(format!("{id}.png"));
            let (x0, y0) = (i % (w / 2), (i * 2) % (h / 2));
            BinaryMask::from_rect(w, h, x0, y0, w / 3 + i % 3, h / 4 + 1)
                .save_png(&dir.join(&p))
                .unwrap();
            p
        });
        records.push(SmokeSample {
            id,
            image_path,
            mask_path,
            caption: "smoke above trees".into(),
            source: Source::Synthetic,
            split: if i % 4 == 3 { Split::Val } else { Split::Train },
        });
    }
    let m = Manifest::new(records);
    let path = dir.join("manifest.jsonl");
    m.write(&path).unwrap();
    (path, m)
}
