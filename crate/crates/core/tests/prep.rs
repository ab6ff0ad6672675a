use std::cell::Cell;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use smokeforge::corpus::{BinaryMask, Manifest, Source};
use smokeforge::prep::*;
use smokeforge::Error;

struct Blank;

impl SegmentationClient for Blank {
    fn segment(&self, image: &RgbImage, _: &BBoxPrompt) -> smokeforge::Result<GrayImage> {
        Ok(GrayImage::new(image.width(), image.height()))
    }
}

/// Segments `x0 = 1` boxes as empty, everything else as the box.
struct EmptyForX1;

impl SegmentationClient for EmptyForX1 {
    fn segment(&self, image: &RgbImage, p: &BBoxPrompt) -> smokeforge::Result<GrayImage> {
        if p.x0 == 1 {
            Blank.segment(image, p)
        } else {
            BoxSegmenter.segment(image, p)
        }
    }
}

/// Fails with a transport error for the first `fail` calls.
struct Flaky {
    fail: Cell<usize>,
}

impl SegmentationClient for Flaky {
    fn segment(&self, image: &RgbImage, p: &BBoxPrompt) -> smokeforge::Result<GrayImage> {
        if self.fail.get() > 0 {
            self.fail.set(self.fail.get() - 1);
            return Err(Error::Transport("segmenter busy".into()));
        }
        BoxSegmenter.segment(image, p)
    }
}

struct Replies(Vec<&'static str>, Cell<usize>);

impl CaptionClient for Replies {
    fn caption(&self, _: &RgbImage, _: usize) -> smokeforge::Result<String> {
        let i = self.1.get();
        self.1.set(i + 1);
        Ok(self.0[i.min(self.0.len() - 1)].to_string())
    }
}

fn img(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| Rgb([x as u8 * 9, y as u8 * 7, 40]))
}

fn captioner() -> FixedCaptioner {
    FixedCaptioner {
        text: "grey smoke rising above a pine forest".into(),
    }
}

#[test]
fn box_mock_yields_the_box() {
    let p = BBoxPrompt {
        x0: 3,
        y0: 2,
        w: 5,
        h: 4,
    };
    let m = segment_smoke(&img(12, 10), &p, &BoxSegmenter).unwrap();
    assert_eq!(m, BinaryMask::from_rect(12, 10, 3, 2, 5, 4));
    assert!(matches!(
        segment_smoke(&img(12, 10), &p, &Blank),
        Err(Error::NoForeground)
    ));
    let outside = BBoxPrompt {
        x0: 10,
        y0: 2,
        w: 5,
        h: 4,
    };
    assert!(matches!(
        segment_smoke(&img(12, 10), &outside, &BoxSegmenter),
        Err(Error::InvalidInput(_))
    ));
    let zero = BBoxPrompt {
        x0: 1,
        y0: 1,
        w: 0,
        h: 4,
    };
    assert!(segment_smoke(&img(12, 10), &zero, &BoxSegmenter).is_err());
}

#[test]
fn captions_respect_budget_order_and_stop_patterns() {
    let c = captioner();
    assert_eq!(caption_image(&img(4, 4), &c, 20, &[]).unwrap(), c.text);
    assert_eq!(caption_image(&img(4, 4), &c, 1, &[]).unwrap(), "grey");
    let stops = vec!["at dusk".to_string(), "in California".to_string()];
    let r = Replies(
        vec!["Smoke over hills at Dusk in california."],
        Cell::new(0),
    );
    assert_eq!(
        caption_image(&img(4, 4), &r, 20, &stops).unwrap(),
        "Smoke over hills"
    );
    assert!(caption_image(&img(4, 4), &c, 0, &[]).is_err());

    let r = Replies(vec!["", "smoke plume"], Cell::new(0));
    assert_eq!(
        caption_image(&img(4, 4), &r, 20, &[]).unwrap(),
        "smoke plume"
    );
    let r = Replies(vec!["", " "], Cell::new(0));
    assert!(caption_image(&img(4, 4), &r, 20, &[]).is_err());
    assert_eq!(r.1.get(), 2);

    let numbered = Replies(vec!["first", "second", "third"], Cell::new(0));
    let out: Vec<String> = caption_batch(&[img(4, 4), img(5, 5), img(6, 6)], &numbered, 5, &[])
        .into_iter()
        .map(Result::unwrap)
        .collect();
    assert_eq!(out, ["first", "second", "third"]);
}

fn write_detections(dir: &Path, boxes: &[(usize, usize)]) -> Vec<DetectionRecord> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, &(x0, y0))| {
            img(16, 12).save(dir.join(format!("d{i}.png"))).unwrap();
            DetectionRecord {
                id: format!("det{i}"),
                image_path: format!("d{i}.png").into(),
                bboxes: vec![BBoxPrompt { x0, y0, w: 6, h: 5 }],
            }
        })
        .collect()
}

#[test]
fn three_images_give_three_triples() {
    let dir = tempfile::tempdir().unwrap();
    let dets = write_detections(dir.path(), &[(0, 0), (4, 3), (9, 6)]);
    let out = dir.path().join("out");
    let rep = build_training_set(
        &dets,
        dir.path(),
        &BoxSegmenter,
        &captioner(),
        &PrepConfig::default(),
        &out,
    )
    .unwrap();
    assert_eq!(rep.added, 3);
    assert!(rep.quarantined.is_empty());
    let m = Manifest::read(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(m, rep.manifest);
    for (rec, det) in m.records.iter().zip(&dets) {
        assert_eq!(rec.id, sample_id(&det.id, 0));
        assert_eq!(rec.source, Source::Real);
        let b = det.bboxes[0];
        let mask = BinaryMask::load(&out.join(rec.mask_path.as_ref().unwrap()), 128).unwrap();
        assert_eq!(mask, BinaryMask::from_rect(16, 12, b.x0, b.y0, b.w, b.h));
        assert!(image::open(&rec.image_path).is_ok());
    }
}

#[test]
fn rerun_after_interruption_appends_only_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let dets = write_detections(dir.path(), &[(0, 0), (4, 3), (9, 6)]);
    let out = dir.path().join("out");
    build_training_set(
        &dets[..2],
        dir.path(),
        &BoxSegmenter,
        &captioner(),
        &PrepConfig::default(),
        &out,
    )
    .unwrap();
    let rep = build_training_set(
        &dets,
        dir.path(),
        &BoxSegmenter,
        &captioner(),
        &PrepConfig::default(),
        &out,
    )
    .unwrap();
    assert_eq!((rep.added, rep.skipped), (1, 2));
    assert_eq!(rep.manifest.len(), 3);

    let full = dir.path().join("full");
    build_training_set(
        &dets,
        dir.path(),
        &BoxSegmenter,
        &captioner(),
        &PrepConfig::default(),
        &full,
    )
    .unwrap();
    let bytes = std::fs::read(full.join("manifest.jsonl")).unwrap();
    assert_eq!(std::fs::read(out.join("manifest.jsonl")).unwrap(), bytes);
    let again = build_training_set(
        &dets,
        dir.path(),
        &BoxSegmenter,
        &captioner(),
        &PrepConfig::default(),
        &full,
    )
    .unwrap();
    assert_eq!(again.added, 0);
    assert_eq!(std::fs::read(full.join("manifest.jsonl")).unwrap(), bytes);
}

#[test]
fn empty_masks_and_bad_records_are_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let mut dets = write_detections(dir.path(), &[(0, 0), (1, 3), (9, 6)]);
    let out = dir.path().join("out");
    let rep = build_training_set(
        &dets,
        dir.path(),
        &EmptyForX1,
        &captioner(),
        &PrepConfig::default(),
        &out,
    )
    .unwrap();
    assert_eq!(rep.added, 2);
    assert_eq!(rep.quarantined.len(), 1);
    assert_eq!(rep.quarantined[0].image_id, "det1");
    let q: Vec<PrepQuarantine> =
        smokeforge::corpus::read_jsonl(&out.join("quarantine.jsonl")).unwrap();
    assert_eq!(q, rep.quarantined);
    // Non-transport quarantine is final.
    let rep = build_training_set(
        &dets,
        dir.path(),
        &BoxSegmenter,
        &captioner(),
        &PrepConfig::default(),
        &out,
    )
    .unwrap();
    assert_eq!(rep.added, 0);

    dets.push(DetectionRecord {
        id: "missing".into(),
        image_path: "nope.png".into(),
        bboxes: vec![BBoxPrompt {
            x0: 0,
            y0: 0,
            w: 2,
            h: 2,
        }],
    });
    dets.push(DetectionRecord {
        id: "nobox".into(),
        image_path: "d0.png".into(),
        bboxes: vec![],
    });
    let rep = build_training_set(
        &dets,
        dir.path(),
        &BoxSegmenter,
        &captioner(),
        &PrepConfig::default(),
        &out,
    )
    .unwrap();
    assert_eq!(rep.quarantined.len(), 2);
    assert_eq!(rep.manifest.len(), 2);
}

#[test]
fn transport_failures_retry_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let dets = write_detections(dir.path(), &[(0, 0), (4, 3)]);
    let out = dir.path().join("out");
    let cfg = PrepConfig::default();
    let flaky = Flaky { fail: Cell::new(1) };
    let rep = build_training_set(&dets, dir.path(), &flaky, &captioner(), &cfg, &out).unwrap();
    assert_eq!(rep.added, 2);

    let out = dir.path().join("out2");
    let down = Flaky { fail: Cell::new(2) };
    let rep = build_training_set(&dets, dir.path(), &down, &captioner(), &cfg, &out).unwrap();
    assert_eq!(rep.added, 1);
    assert!(rep.quarantined[0].retryable);
    let rep =
        build_training_set(&dets, dir.path(), &BoxSegmenter, &captioner(), &cfg, &out).unwrap();
    assert_eq!((rep.added, rep.skipped), (1, 1));
    assert_eq!(rep.manifest.len(), 2);
}

#[test]
fn detection_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("det.jsonl");
    std::fs::write(&p, "{\"id\":\"a\",\"image_path\":\"a.jpg\",\"bboxes\":[{\"x0\":1,\"y0\":2,\"w\":3,\"h\":4}]}\n").unwrap();
    let d = read_detections(&p).unwrap();
    assert_eq!(
        d[0].bboxes[0],
        BBoxPrompt {
            x0: 1,
            y0: 2,
            w: 3,
            h: 4
        }
    );
    assert!(read_detections(&dir.path().join("missing.jsonl")).is_err());
    assert_eq!(
        strip_patterns(
            "Smoke, at noon, near Reno",
            &["at noon".into(), "near reno".into()]
        ),
        "Smoke,"
    );
}
