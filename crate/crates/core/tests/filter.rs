use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smokeforge::corpus::{BinaryMask, Manifest, SmokeSample, Source, Split};
use smokeforge::filter::*;
use smokeforge::Error;

fn rec(id: &str, weighted: f64) -> ScoreRecord {
    ScoreRecord {
        sample_id: id.into(),
        color: weighted,
        visibility: weighted,
        translucency: weighted,
        weighted,
        scorer: Scorer::Mock,
        clamped: false,
        quarantined: false,
    }
}

#[test]
fn weighted_score_examples() {
    assert_eq!(weighted_score(10.0, 10.0, 10.0).unwrap(), 10.0);
    assert_eq!(weighted_score(0.0, 0.0, 0.0).unwrap(), 0.0);
    assert_eq!(weighted_score(8.0, 6.0, 4.0).unwrap(), 6.6);
    for bad in [(10.5, 0.0, 0.0), (0.0, -0.1, 0.0), (0.0, 0.0, f64::NAN)] {
        assert!(matches!(
            weighted_score(bad.0, bad.1, bad.2),
            Err(Error::InvalidInput(_))
        ));
    }
    // Every integer triple equals the decimal literal the weights imply.
    for c in 0..=10 {
        for v in 0..=10 {
            for t in 0..=10 {
                let tenths = 5 * c + 3 * v + 2 * t;
                let literal: f64 = format!("{}.{}", tenths / 10, tenths % 10).parse().unwrap();
                assert_eq!(
                    weighted_score(c as f64, v as f64, t as f64).unwrap(),
                    literal
                );
            }
        }
    }
}

proptest! {
    #[test]
    fn weighted_matches_formula_and_is_monotone(c in 0.0..=10.0f64, v in 0.0..=10.0f64, t in 0.0..=10.0f64, d in 0.0..=10.0f64) {
        let w = weighted_score(c, v, t).unwrap();
        prop_assert!((w - (0.5 * c + 0.3 * v + 0.2 * t)).abs() <= 1e-12);
        prop_assert!((0.0..=10.0).contains(&w));
        prop_assert!(weighted_score((c + d).min(10.0), v, t).unwrap() >= w);
        prop_assert!(weighted_score(c, (v + d).min(10.0), t).unwrap() >= w);
        prop_assert!(weighted_score(c, v, (t + d).min(10.0)).unwrap() >= w);
    }
}

/// Repeated selection of the best remaining record.
fn oracle_select(records: &[ScoreRecord], num: usize, den: usize) -> Vec<ScoreRecord> {
    let k = (num * records.len()).div_ceil(den);
    let mut left: Vec<ScoreRecord> = records.to_vec();
    let mut out = Vec::new();
    while out.len() < k {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (&left[i], &left[best]);
            if a.weighted > b.weighted || (a.weighted == b.weighted && a.sample_id < b.sample_id) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

#[test]
fn select_top_matches_oracle_on_1000_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let fractions = [
        (1, 2),
        (1, 3),
        (3, 10),
        (7, 10),
        (1, 1),
        (1, 4),
        (2, 5),
        (9, 10),
    ];
    for case in 0..1000 {
        let n = rng.random_range(0..60);
        let records: Vec<_> = (0..n)
            .map(|_| {
                let id = format!("s{:03}", rng.random_range(0..1000));
                let w = if rng.random_bool(0.5) {
                    rng.random_range(0..5) as f64
                } else {
                    rng.random_range(0.0..10.0)
                };
                rec(&id, w)
            })
            .collect();
        let (num, den) = fractions[case % fractions.len()];
        let got = select_top(&records, num as f64 / den as f64).unwrap();
        assert_eq!(got, oracle_select(&records, num, den), "case {case}");
        assert_eq!(select_top(&got, 1.0).unwrap(), got);
    }
}

#[test]
fn select_top_examples() {
    let r = vec![rec("d", 7.0), rec("a", 1.0), rec("c", 9.0), rec("b", 7.0)];
    let ids = |v: Vec<ScoreRecord>| v.into_iter().map(|r| r.sample_id).collect::<Vec<_>>();
    assert_eq!(ids(select_top(&r, 0.5).unwrap()), ["c", "b"]);
    assert_eq!(ids(select_top(&r, 1.0).unwrap()), ["c", "b", "d", "a"]);
    assert!(select_top(&[], 0.5).unwrap().is_empty());
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        assert!(matches!(select_top(&r, bad), Err(Error::InvalidInput(_))));
    }
    assert_eq!(keep_count(10, 0.3).unwrap(), 3);
    assert_eq!(keep_count(7, 0.5).unwrap(), 4);
    assert_eq!(keep_count(1, 0.01).unwrap(), 1);
}

#[test]
fn sixty_thousand_half_is_thirty_thousand() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let records: Vec<_> = (0..60_000)
        .map(|i| {
            let s = [0, 1, 2].map(|_| rng.random_range(0..=10) as f64);
            ScoreRecord::new(format!("gen{i:05}"), s[0], s[1], s[2], Scorer::Mock).unwrap()
        })
        .collect();
    let top = select_top(&records, 0.5).unwrap();
    assert_eq!(top.len(), 30_000);
    let cut = top.last().unwrap().weighted;
    assert!(records.iter().filter(|r| r.weighted > cut).count() < 30_000);
    assert!(top.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()));
}

fn sample(id: &str, image: &str, mask: Option<&str>) -> SmokeSample {
    SmokeSample {
        id: id.into(),
        image_path: image.into(),
        mask_path: mask.map(Into::into),
        caption: "smoke".into(),
        source: Source::Synthetic,
        split: Split::Train,
    }
}

#[test]
fn selected_manifest_follows_rank_order() {
    let m = Manifest::new(vec![
        sample("a", "a.png", None),
        sample("b", "b.png", None),
        sample("c", "c.png", None),
    ]);
    let sel = select_top(&[rec("a", 1.0), rec("b", 5.0), rec("c", 3.0)], 1.0).unwrap();
    let out = selected_manifest(&sel, &m).unwrap();
    assert_eq!(
        out.records
            .iter()
            .map(|r| r.id.as_str())
            .collect::<Vec<_>>(),
        ["b", "c", "a"]
    );
    assert!(selected_manifest(&[rec("zz", 1.0)], &m).is_err());
}

#[test]
fn mock_heuristic_matches_hand_values() {
    // 8×8 frame, mask = left half at gray 200, right half at gray 72.
    let img = RgbImage::from_fn(8, 8, |x, _| {
        if x < 4 {
            Rgb([200, 200, 200])
        } else {
            Rgb([72, 72, 72])
        }
    });
    let mask = BinaryMask::from_rect(8, 8, 0, 0, 4, 8);
    let [c, v, t] = MockScorer.score(&img, Some(&mask), "").unwrap();
    assert!((c - 10.0).abs() < 1e-9);
    assert!((v - 10.0 * 128.0 / 255.0).abs() < 1e-9);
    assert_eq!(t, 0.0);

    // Uniform rim around a brighter core: the edge band has no variance of its own.
    let mask = BinaryMask::from_rect(8, 8, 1, 1, 6, 6);
    let img = RgbImage::from_fn(8, 8, |x, y| {
        let core = (2..6).contains(&x) && (2..6).contains(&y);
        Rgb(if core { [250; 3] } else { [150; 3] })
    });
    let [_, _, t] = MockScorer.score(&img, Some(&mask), "").unwrap();
    let band: Vec<f64> = vec![150.0; 20];
    let region: Vec<f64> = band
        .iter()
        .copied()
        .chain(std::iter::repeat_n(250.0, 16))
        .collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    assert!((t - 10.0 * (var(&band) / var(&region)).min(1.0)).abs() < 1e-9);
    assert_eq!(MockScorer.kind(), Scorer::Mock);
}

fn write_pool(dir: &Path, n: usize) -> Manifest {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    (0..n)
        .map(|i| {
            let img = RgbImage::from_fn(16, 16, |_, _| {
                let g = rng.random_range(0..=255u8);
                Rgb([g, g, g])
            });
            let mask = BinaryMask::from_rect(16, 16, i % 8, 2, 6, 7);
            img.save(dir.join(format!("{i}.png"))).unwrap();
            mask.save_png(&dir.join(format!("{i}_m.png"))).unwrap();
            sample(
                &format!("gen{i:02}"),
                &format!("{i}.png"),
                Some(&format!("{i}_m.png")),
            )
        })
        .collect()
}

#[test]
fn mock_scoring_is_deterministic_and_parallel_safe() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_pool(dir.path(), 12);
    let serial = score_candidates(
        &m,
        dir.path(),
        &MockScorer,
        &ScoreConfig::default(),
        &dir.path().join("a.jsonl"),
    )
    .unwrap();
    let cfg = ScoreConfig {
        workers: 4,
        ..ScoreConfig::default()
    };
    let parallel = score_candidates(
        &m,
        dir.path(),
        &MockScorer,
        &cfg,
        &dir.path().join("b.jsonl"),
    )
    .unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.len(), 12);
    assert!(serial
        .iter()
        .zip(&m.records)
        .all(|(s, r)| s.sample_id == r.id && s.validate().is_ok()));
    let on_disk: Vec<ScoreRecord> =
        smokeforge::corpus::read_jsonl(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(on_disk, serial);
}

/// Fails with a transport error for the first `fail` calls of each sample set, then returns `scores`.
struct Flaky {
    calls: AtomicUsize,
    fail: usize,
    scores: [f64; 3],
}

impl ScorerClient for Flaky {
    fn score(&self, _: &RgbImage, _: Option<&BinaryMask>, _: &str) -> smokeforge::Result<[f64; 3]> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.fail {
            Err(Error::Transport("connection refused".into()))
        } else {
            Ok(self.scores)
        }
    }
}

#[test]
fn clamping_retries_and_quarantine() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_pool(dir.path(), 2);
    let over = Flaky {
        calls: AtomicUsize::new(0),
        fail: 2,
        scores: [12.0, 5.0, 5.0],
    };
    let out = score_candidates(
        &m,
        dir.path(),
        &over,
        &ScoreConfig::default(),
        &dir.path().join("a.jsonl"),
    )
    .unwrap();
    assert_eq!(out[0].color, 10.0);
    assert!(out[0].clamped && !out[0].quarantined);
    assert_eq!(out[0].scorer, Scorer::Mllm);
    assert_eq!(over.calls.load(Ordering::SeqCst), 4);

    let down = Flaky {
        calls: AtomicUsize::new(0),
        fail: 3,
        scores: [5.0; 3],
    };
    let out = score_candidates(
        &m,
        dir.path(),
        &down,
        &ScoreConfig::default(),
        &dir.path().join("b.jsonl"),
    )
    .unwrap();
    assert!(out[0].quarantined);
    assert_eq!(
        (
            out[0].color,
            out[0].visibility,
            out[0].translucency,
            out[0].weighted
        ),
        (0.0, 0.0, 0.0, 0.0)
    );
    assert!(!out[1].quarantined);

    // Unreadable image: quarantined without calling the scorer.
    let mut broken = m.clone();
    broken.records[1].image_path = "missing.png".into();
    let out = score_candidates(
        &broken,
        dir.path(),
        &MockScorer,
        &ScoreConfig::default(),
        &dir.path().join("c.jsonl"),
    )
    .unwrap();
    assert!(out[1].quarantined && !out[0].quarantined);
}

#[test]
fn outage_aborts_and_resume_rescores_only_what_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_pool(dir.path(), 10);
    let results = dir.path().join("scores.jsonl");
    let cfg = ScoreConfig {
        outage_after: 3,
        ..ScoreConfig::default()
    };
    // Scores four samples, then the scorer goes away.
    struct Dies(AtomicUsize);
    impl ScorerClient for Dies {
        fn score(
            &self,
            img: &RgbImage,
            mask: Option<&BinaryMask>,
            p: &str,
        ) -> smokeforge::Result<[f64; 3]> {
            if self.0.fetch_add(1, Ordering::SeqCst) < 4 {
                MockScorer.score(img, mask, p)
            } else {
                Err(Error::Transport("gone".into()))
            }
        }

        fn kind(&self) -> Scorer {
            Scorer::Mock
        }
    }
    let err =
        score_candidates(&m, dir.path(), &Dies(AtomicUsize::new(0)), &cfg, &results).unwrap_err();
    assert!(matches!(err, Error::Transport(_)));
    let partial: Vec<ScoreRecord> = smokeforge::corpus::read_jsonl(&results).unwrap();
    assert_eq!(partial.iter().filter(|r| !r.quarantined).count(), 4);

    // A crash mid-append leaves a torn line; it is dropped on resume.
    let mut text = std::fs::read_to_string(&results).unwrap();
    text.push_str("{\"sample_id\":\"gen0");
    std::fs::write(&results, text).unwrap();

    let counting = Flaky {
        calls: AtomicUsize::new(0),
        fail: 0,
        scores: [1.0, 2.0, 3.0],
    };
    let out = score_candidates(&m, dir.path(), &counting, &cfg, &results).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 6);
    assert_eq!(out.len(), 10);
    assert!(out.iter().all(|r| !r.quarantined));
    let fresh = score_candidates(
        &m,
        dir.path(),
        &MockScorer,
        &cfg,
        &dir.path().join("fresh.jsonl"),
    )
    .unwrap();
    assert_eq!(out[..4], fresh[..4]);
}

#[test]
fn finetune_set_assembly() {
    let dir = tempfile::tempdir().unwrap();
    let m: Manifest = (0..100)
        .map(|i| sample(&format!("g{i:03}"), &format!("img/{i}.png"), None))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let ann: Vec<_> = m
        .records
        .iter()
        .map(|r| {
            let s = [0, 1, 2].map(|_| rng.random_range(0..=10) as f64);
            ScoreRecord::new(&r.id, s[0], s[1], s[2], Scorer::Human).unwrap()
        })
        .collect();
    let out = dir.path().join("ft.jsonl");
    let sum = assemble_finetune_set(&ann, &m, dir.path(), DEFAULT_SCORING_PROMPT, &out).unwrap();
    assert_eq!(sum.written, 100);
    let lines: Vec<FinetuneRecord> = smokeforge::corpus::read_jsonl(&out).unwrap();
    assert_eq!(lines.len(), 100);
    for (l, a) in lines.iter().zip(&ann) {
        assert_eq!(l.prompt, DEFAULT_SCORING_PROMPT);
        assert_eq!(
            parse_response(&l.response).unwrap(),
            [a.color, a.visibility, a.translucency]
        );
        assert!(l.image_path.starts_with(dir.path()));
    }

    let sum = assemble_finetune_set(&[], &m, dir.path(), "p", &out).unwrap();
    assert_eq!(sum.written, 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");

    let dup = vec![
        ScoreRecord::new("g001", 1.0, 1.0, 1.0, Scorer::Human).unwrap(),
        ScoreRecord::new("nope", 1.0, 1.0, 1.0, Scorer::Human).unwrap(),
        ScoreRecord::new("g001", 9.0, 8.0, 7.0, Scorer::Human).unwrap(),
    ];
    let sum = assemble_finetune_set(&dup, &m, dir.path(), "p", &out).unwrap();
    assert_eq!(sum.written, 1);
    assert_eq!(sum.conflicts, ["g001"]);
    assert_eq!(sum.dangling, ["nope"]);
    let lines: Vec<FinetuneRecord> = smokeforge::corpus::read_jsonl(&out).unwrap();
    assert_eq!(parse_response(&lines[0].response).unwrap(), [9.0, 8.0, 7.0]);

    let mut bad = ann[0].clone();
    bad.weighted = 0.123;
    assert!(assemble_finetune_set(&[bad], &m, dir.path(), "p", &out).is_err());
}
