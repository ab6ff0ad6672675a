use std::cell::Cell;
use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smokeforge::corpus::{BinaryMask, Manifest, SmokeSample, Source, Split};
use smokeforge::diffusion::array_to_rgb;
use smokeforge::generator::*;
use smokeforge::injection::{
    default_schedule, AdapterConfig, AdapterSet, InjectionRole, InjectionSchedule,
};
use smokeforge::trainer::toy::{
    blob_image, random_blob_mask, region_means, toy_train_config, train_blob_adapters,
    TOY_SCHEDULE_STEPS,
};
use smokeforge::trainer::Backbone;
use smokeforge::Error;

struct Scripted {
    replies: Vec<Result<String, String>>,
    calls: Cell<usize>,
}

impl Scripted {
    fn new(replies: Vec<Result<&str, &str>>) -> Self {
        Self {
            replies: replies
                .into_iter()
                .map(|r| r.map(String::from).map_err(String::from))
                .collect(),
            calls: Cell::new(0),
        }
    }
}

impl RewriteClient for &'static Scripted {
    fn rewrite(&self, _caption: &str) -> smokeforge::Result<String> {
        let i = self.calls.get();
        self.calls.set(i + 1);
        match &self.replies[i.min(self.replies.len() - 1)] {
            Ok(s) => Ok(s.clone()),
            Err(e) => Err(Error::Transport(e.clone())),
        }
    }
}

fn leak(s: Scripted) -> &'static Scripted {
    Box::leak(Box::new(s))
}

#[test]
fn offline_rewrite_appends_template() {
    let r = CaptionRewriter::default();
    assert_eq!(
        rewrite_caption("a forest on a hillside", &r).unwrap(),
        "a forest on a hillside with smoke"
    );
    assert_eq!(
        r.rewrite("smoke drifting over a ridge").unwrap(),
        "smoke drifting over a ridge"
    );
    let once = r.rewrite("a lake at noon").unwrap();
    assert_eq!(r.rewrite(&once).unwrap(), once);
    assert!(matches!(r.rewrite("   "), Err(Error::InvalidInput(_))));
}

#[test]
fn client_without_smoke_terms_falls_back_after_retries() {
    let client = leak(Scripted::new(vec![Ok("a forest on a hillside at dawn")]));
    let r = CaptionRewriter::with_client(Box::new(client));
    assert_eq!(
        r.rewrite("a forest on a hillside").unwrap(),
        "a forest on a hillside with smoke"
    );
    assert_eq!(client.calls.get(), 1 + REWRITE_RETRIES);

    let client = leak(Scripted::new(vec![
        Err("timeout"),
        Ok(""),
        Ok("a hillside under a grey smoke plume"),
    ]));
    let r = CaptionRewriter::with_client(Box::new(client));
    assert_eq!(
        r.rewrite("a hillside").unwrap(),
        "a hillside under a grey smoke plume"
    );
    assert_eq!(client.calls.get(), 3);

    let client = leak(Scripted::new(vec![Ok("unused")]));
    let r = CaptionRewriter::with_client(Box::new(client));
    assert_eq!(
        r.rewrite("a plume over pines").unwrap(),
        "a plume over pines"
    );
    assert_eq!(client.calls.get(), 0);
}

fn backgrounds(n: usize) -> Manifest {
    (0..n)
        .map(|i| SmokeSample {
            id: format!("bg{i:05}"),
            image_path: format!("bg/{i}.png").into(),
            mask_path: None,
            caption: "a forest on a hillside".into(),
            source: Source::Background,
            split: Split::Train,
        })
        .collect()
}

#[test]
fn pairing_counts_and_determinism() {
    let bgs = backgrounds(10_000);
    let pairs = pair_masks(&bgs, 500, 2, 7).unwrap();
    assert_eq!(pairs.len(), 20_000);
    assert_eq!(pairs, pair_masks(&bgs, 500, 2, 7).unwrap());
    assert_ne!(pairs, pair_masks(&bgs, 500, 2, 8).unwrap());
    for chunk in pairs.chunks(2) {
        assert_eq!(chunk[0].background, chunk[1].background);
        assert_ne!(chunk[0].mask_index, chunk[1].mask_index);
        assert!(chunk.iter().all(|p| p.mask_index < 500));
    }
    let ids: HashSet<_> = pairs.iter().map(|p| &p.id).collect();
    assert_eq!(ids.len(), pairs.len());

    assert!(pair_masks(&bgs, 500, 0, 7).unwrap().is_empty());
    let tiny = pair_masks(&backgrounds(3), 1, 2, 7).unwrap();
    assert!(tiny.iter().all(|p| p.mask_index == 0));
    assert!(matches!(
        pair_masks(&bgs, 0, 2, 7),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn pair_mask_is_nearest_resized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = vec![
        BinaryMask::from_fn(6, 4, |x, y| (x * 7 + y * 3) % 5 < 2),
        random_blob_mask(8, &mut rng),
    ];
    let pair = &pair_masks(&backgrounds(1), pool.len(), 1, 0).unwrap()[0];
    let src = &pool[pair.mask_index];
    let (sw, sh) = src.dims();
    let m = pair.mask(&pool, 15, 9).unwrap();
    for y in 0..9 {
        for x in 0..15 {
            assert_eq!(m.get(x, y), src.get(x * sw / 15, y * sh / 9));
        }
    }
}

/// Writes `n` plain backgrounds of `size` pixels under `dir/bg`.
fn write_backgrounds(dir: &Path, n: usize, size: usize) -> Manifest {
    std::fs::create_dir_all(dir.join("bg")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let m = backgrounds(n);
    for r in &m.records {
        let img = blob_image(&BinaryMask::zeros(size, size), &mut rng);
        array_to_rgb(img.view())
            .save(dir.join(&r.image_path))
            .unwrap();
    }
    m
}

fn quick_cfg() -> GenConfig {
    GenConfig {
        steps: 5,
        clip_sample: Some(1.0),
        ..GenConfig::default()
    }
}

fn untrained(backbone: &Backbone) -> AdapterSet {
    AdapterSet::init(
        default_schedule(),
        backbone.denoiser.tap_points(),
        AdapterConfig::default(),
    )
    .unwrap()
}

#[test]
fn single_pair_single_sample() {
    let dir = tempfile::tempdir().unwrap();
    let bgs = write_backgrounds(dir.path(), 1, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = vec![random_blob_mask(8, &mut rng)];
    let backbone = Backbone::toy(TOY_SCHEDULE_STEPS, 0).unwrap();
    let pairs = pair_masks(&bgs, 1, 1, 0).unwrap();
    let cfg = GenConfig {
        samples_per_pair: 1,
        ..quick_cfg()
    };
    let out = dir.path().join("out");
    let rep = generate_batch(
        &pairs,
        &pool,
        &backbone,
        &untrained(&backbone),
        &CaptionRewriter::default(),
        &cfg,
        dir.path(),
        &out,
    )
    .unwrap();
    assert_eq!(rep.manifest.len(), 1);
    let rec = &rep.manifest.records[0];
    assert_eq!(rec.caption, "a forest on a hillside with smoke");
    assert_eq!(rec.source, Source::Synthetic);
    let mask = BinaryMask::load(&out.join(rec.mask_path.as_ref().unwrap()), 128).unwrap();
    assert_eq!(mask, pool[0]);
    assert_eq!(
        Manifest::read(&out.join("manifest.jsonl")).unwrap(),
        rep.manifest
    );
    assert_eq!(
        std::fs::read_to_string(out.join("quarantine.jsonl")).unwrap(),
        ""
    );
}

/// Outside the mask every output byte equals the (resized) source background.
fn assert_background_kept(out: &Path, base: &Path, m: &Manifest, bgs: &Manifest, size: u32) {
    for rec in &m.records {
        let bg_id = rec.id.split('-').next().unwrap();
        let bg = image::open(base.join(&bgs.get(bg_id).unwrap().image_path))
            .unwrap()
            .to_rgb8();
        let bg = image::imageops::resize(&bg, size, size, image::imageops::FilterType::Triangle);
        let img = image::open(out.join(&rec.image_path)).unwrap().to_rgb8();
        let mask = BinaryMask::load(&out.join(rec.mask_path.as_ref().unwrap()), 128).unwrap();
        assert_eq!(img.dimensions(), (size, size));
        for (x, y, px) in img.enumerate_pixels() {
            if !mask.get(x as usize, y as usize) {
                assert_eq!(px, bg.get_pixel(x, y), "{} at ({x},{y})", rec.id);
            }
        }
    }
}

#[test]
fn counts_background_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let bgs = write_backgrounds(dir.path(), 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool: Vec<_> = (0..5).map(|_| random_blob_mask(8, &mut rng)).collect();
    let backbone = Backbone::toy(TOY_SCHEDULE_STEPS, 0).unwrap();
    let adapters = untrained(&backbone);
    let cfg = quick_cfg();
    let pairs = pair_masks(&bgs, pool.len(), cfg.masks_per_background, cfg.seed).unwrap();
    // One background missing on disk: its pairs are quarantined.
    std::fs::remove_file(dir.path().join(&bgs.records[2].image_path)).unwrap();

    let a = dir.path().join("a");
    let rep = generate_batch(
        &pairs,
        &pool,
        &backbone,
        &adapters,
        &CaptionRewriter::default(),
        &cfg,
        dir.path(),
        &a,
    )
    .unwrap();
    assert_eq!(rep.quarantined.len(), 2);
    assert!(rep.quarantined.iter().all(|q| q.background_id == "bg00002"));
    assert_eq!(
        rep.manifest.len(),
        (pairs.len() - rep.quarantined.len()) * cfg.samples_per_pair
    );
    let q: Vec<QuarantineEntry> =
        smokeforge::corpus::read_jsonl(&a.join("quarantine.jsonl")).unwrap();
    assert_eq!(q, rep.quarantined);
    assert_background_kept(&a, dir.path(), &rep.manifest, &bgs, 8);

    let b = dir.path().join("b");
    let again = generate_batch(
        &pairs,
        &pool,
        &backbone,
        &adapters,
        &CaptionRewriter::default(),
        &cfg,
        dir.path(),
        &b,
    )
    .unwrap();
    assert_eq!(again.manifest, rep.manifest);
    for rec in &rep.manifest.records {
        assert_eq!(
            std::fs::read(a.join(&rec.image_path)).unwrap(),
            std::fs::read(b.join(&rec.image_path)).unwrap()
        );
    }

    // Pair seeds depend on pair ids, not on position in the batch.
    let c = dir.path().join("c");
    let reversed: Vec<_> = pairs.iter().rev().cloned().collect();
    let rev = generate_batch(
        &reversed,
        &pool,
        &backbone,
        &adapters,
        &CaptionRewriter::default(),
        &cfg,
        dir.path(),
        &c,
    )
    .unwrap();
    let rec = &rep.manifest.records[0];
    assert!(rev.manifest.get(&rec.id).is_some());
    assert_eq!(
        std::fs::read(a.join(&rec.image_path)).unwrap(),
        std::fs::read(c.join(&rec.image_path)).unwrap()
    );
}

#[test]
fn larger_output_resolution_keeps_background() {
    let dir = tempfile::tempdir().unwrap();
    let bgs = write_backgrounds(dir.path(), 2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pool = vec![random_blob_mask(8, &mut rng), random_blob_mask(8, &mut rng)];
    let backbone = Backbone::toy(TOY_SCHEDULE_STEPS, 0).unwrap();
    let cfg = GenConfig {
        output_resolution: Some((16, 16)),
        samples_per_pair: 1,
        ..quick_cfg()
    };
    let pairs = pair_masks(&bgs, pool.len(), 2, 0).unwrap();
    let out = dir.path().join("out");
    let rep = generate_batch(
        &pairs,
        &pool,
        &backbone,
        &untrained(&backbone),
        &CaptionRewriter::default(),
        &cfg,
        dir.path(),
        &out,
    )
    .unwrap();
    assert_eq!(rep.manifest.len(), 4);
    assert_background_kept(&out, dir.path(), &rep.manifest, &bgs, 16);
}

#[test]
fn incompatible_adapters_and_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bgs = write_backgrounds(dir.path(), 1, 8);
    let pool = vec![BinaryMask::from_rect(8, 8, 2, 2, 3, 3)];
    let pairs = pair_masks(&bgs, 1, 1, 0).unwrap();
    let backbone = Backbone::toy(TOY_SCHEDULE_STEPS, 0).unwrap();
    let schedule =
        InjectionSchedule::new([(40, InjectionRole::Mask)].into_iter().collect()).unwrap();
    let wrong = AdapterSet::init(
        schedule,
        backbone.denoiser.tap_points(),
        AdapterConfig::default(),
    );
    assert!(wrong.is_err());

    let out = dir.path().join("out");
    let ok = untrained(&backbone);
    let run = |cfg: GenConfig| {
        generate_batch(
            &pairs,
            &pool,
            &backbone,
            &ok,
            &CaptionRewriter::default(),
            &cfg,
            dir.path(),
            &out,
        )
    };
    assert!(matches!(
        run(GenConfig {
            steps: 101,
            ..quick_cfg()
        }),
        Err(Error::InvalidConfig(_))
    ));
    assert!(matches!(
        run(GenConfig {
            samples_per_pair: 0,
            ..quick_cfg()
        }),
        Err(Error::InvalidConfig(_))
    ));
    assert!(run(quick_cfg()).is_ok());

    let other = Backbone::toy(TOY_SCHEDULE_STEPS, 0).unwrap();
    let mut shrunk = untrained(&other);
    let key = shrunk
        .params
        .keys()
        .find(|k| k.ends_with("proj_w"))
        .unwrap()
        .clone();
    shrunk.params.insert(key, ndarray::Array2::zeros((1, 1)));
    assert!(generate_batch(
        &pairs,
        &pool,
        &backbone,
        &shrunk,
        &CaptionRewriter::default(),
        &quick_cfg(),
        dir.path(),
        &out
    )
    .is_err());
}

#[test]
fn trained_blob_adapters_fill_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (backbone, summary) =
        train_blob_adapters(&toy_train_config(), &dir.path().join("train")).unwrap();
    // The generator reads the training checkpoint directly.
    let adapters = AdapterSet::load(summary.checkpoints.last().unwrap()).unwrap();
    assert_eq!(adapters, summary.adapters);

    let bgs = write_backgrounds(dir.path(), 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pool: Vec<_> = (0..10).map(|_| random_blob_mask(8, &mut rng)).collect();
    let cfg = GenConfig {
        samples_per_pair: 1,
        clip_sample: Some(1.0),
        ..GenConfig::default()
    };
    let pairs = pair_masks(&bgs, pool.len(), cfg.masks_per_background, 0).unwrap();
    let out = dir.path().join("out");
    let rewriter = CaptionRewriter::default();
    let rep = generate_batch(
        &pairs,
        &pool,
        &backbone,
        &adapters,
        &rewriter,
        &cfg,
        dir.path(),
        &out,
    )
    .unwrap();
    assert_eq!(rep.manifest.len(), 10);
    let mut brighter = 0;
    for rec in &rep.manifest.records {
        let img = smokeforge::diffusion::rgb_to_array(
            &image::open(out.join(&rec.image_path)).unwrap().to_rgb8(),
        );
        let mask = BinaryMask::load(&out.join(rec.mask_path.as_ref().unwrap()), 128).unwrap();
        let (inside, outside) = region_means(&img, &mask);
        if inside > outside {
            brighter += 1;
        }
    }
    assert!(
        brighter >= 8,
        "{brighter}/10 outputs brighter inside the mask"
    );
}
