use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use smokeforge::corpus::{
    export_yolo, mix_datasets, read_jsonl, resolve, validate_manifest, write_atomic, BinaryMask,
    Manifest, DEFAULT_THRESHOLD,
};
use smokeforge::evalkit::{evaluate_pairs, EvalClients};
use smokeforge::filter::{
    score_candidates, select_top, selected_manifest, MockScorer, ScoreRecord,
};
use smokeforge::generator::{generate_batch, pair_masks, CaptionRewriter};
use smokeforge::injection::{default_schedule, AdapterConfig, AdapterSet};
use smokeforge::prep::{build_training_set, read_detections, BoxSegmenter, FixedCaptioner};
use smokeforge::trainer::{
    run_training, verify_freeze, Backbone, FreezePolicy, ResumeMode, TrainExample,
};

use crate::config::{Loaded, ModelKind, ModelSection, Segmenter};
use crate::record::Timer;
use crate::server::{self, AnnotationStore};
use crate::{CliError, Command};

type Outcome = Result<Value, CliError>;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8787";

/// Stores a flag value (relative to `cwd`) into a config slot.
fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>, cwd: &Path) {
    if let Some(p) = flag {
        *slot = Some(cwd.join(p));
    }
}

fn need(
    loaded: &Loaded,
    slot: &Option<PathBuf>,
    flag: &str,
    key: &str,
) -> Result<PathBuf, CliError> {
    slot.as_ref().map(|p| loaded.path(p)).ok_or_else(|| {
        CliError::User(format!(
            "missing required flag --{flag} (or `{key}` in --config)"
        ))
    })
}

fn parent(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    if !path.is_file() {
        return Err(CliError::User(format!(
            "manifest {} does not exist",
            path.display()
        )));
    }
    Ok(Manifest::read(path)?)
}

/// Rewrites every relative record path as `base/path`.
fn rebase(mut m: Manifest, base: &Path) -> Manifest {
    for r in &mut m.records {
        r.image_path = resolve(base, &r.image_path);
        r.mask_path = r.mask_path.as_ref().map(|p| resolve(base, p));
    }
    m
}

fn backbone(model: &ModelSection) -> Result<Backbone, CliError> {
    match model.kind {
        ModelKind::Toy => Ok(Backbone::toy(model.schedule_steps, model.seed)?),
    }
}

pub fn dispatch(cmd: &Command, loaded: &mut Loaded, cwd: &Path, timer: &mut Timer) -> Outcome {
    let c = &mut loaded.config;
    match cmd {
        Command::Prep { detections, out } => {
            set(&mut c.prep.detections, detections, cwd);
            set(&mut c.prep.out, out, cwd);
            prep(loaded, timer)
        }
        Command::Train {
            manifest,
            out,
            max_iters,
            restart,
        } => {
            set(&mut c.train.manifest, manifest, cwd);
            set(&mut c.train.out, out, cwd);
            if let Some(n) = max_iters {
                c.train.config.max_iters = *n;
            }
            train(loaded, *restart, timer)
        }
        Command::Generate {
            backgrounds,
            masks,
            ckpt,
            out,
        } => {
            set(&mut c.generate.backgrounds, backgrounds, cwd);
            set(&mut c.generate.masks, masks, cwd);
            set(&mut c.generate.checkpoint, ckpt, cwd);
            set(&mut c.generate.out, out, cwd);
            generate(loaded, timer)
        }
        Command::Score { manifest, out } => {
            set(&mut c.score.manifest, manifest, cwd);
            set(&mut c.score.out, out, cwd);
            score(loaded, timer)
        }
        Command::Select {
            scores,
            manifest,
            fraction,
            out,
        } => {
            set(&mut c.select.scores, scores, cwd);
            set(&mut c.select.manifest, manifest, cwd);
            set(&mut c.select.out, out, cwd);
            if let Some(f) = fraction {
                c.select.fraction = *f;
            }
            select(loaded, timer)
        }
        Command::Export {
            manifest,
            out,
            real,
            total,
        } => {
            set(&mut c.export.manifest, manifest, cwd);
            set(&mut c.export.out, out, cwd);
            set(&mut c.export.mix.real, real, cwd);
            if total.is_some() {
                c.export.mix.total = *total;
            }
            export(loaded, timer)
        }
        Command::Eval {
            generated,
            reference,
            out,
        } => {
            set(&mut c.eval.generated, generated, cwd);
            set(&mut c.eval.reference, reference, cwd);
            set(&mut c.eval.out, out, cwd);
            eval(loaded, timer)
        }
        Command::AnnotateServe {
            manifest,
            annotations,
            addr,
            ui_dir,
        } => {
            set(&mut c.annotate.manifest, manifest, cwd);
            set(&mut c.annotate.annotations, annotations, cwd);
            set(&mut c.annotate.ui_dir, ui_dir, cwd);
            if addr.is_some() {
                c.annotate.addr = addr.clone();
            }
            annotate(loaded, timer)
        }
        Command::Validate => validate(loaded, timer),
    }
}

fn check(loaded: &Loaded) -> Result<(), CliError> {
    let errs = loaded.check_stages();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(CliError::User(errs.join("; ")))
    }
}

fn prep(loaded: &Loaded, timer: &mut Timer) -> Outcome {
    check(loaded)?;
    let c = &loaded.config.prep;
    let det_path = need(loaded, &c.detections, "detections", "prep.detections")?;
    let out = need(loaded, &c.out, "out", "prep.out")?;
    let dets = read_detections(&det_path)?;
    timer.lap("load");
    let captioner = FixedCaptioner {
        text: c.caption.clone(),
    };
    let rep = match c.segmenter {
        Segmenter::Box => build_training_set(
            &dets,
            &parent(&det_path),
            &BoxSegmenter,
            &captioner,
            &c.config,
            &out,
        )?,
    };
    timer.lap("prep");
    Ok(json!({
        "added": rep.added,
        "skipped": rep.skipped,
        "quarantined": rep.quarantined.len(),
        "manifest": out.join("manifest.jsonl"),
    }))
}

fn train(loaded: &Loaded, restart: bool, timer: &mut Timer) -> Outcome {
    check(loaded)?;
    let c = &loaded.config;
    let mpath = need(loaded, &c.train.manifest, "manifest", "train.manifest")?;
    let out = need(loaded, &c.train.out, "out", "train.out")?;
    let manifest = read_manifest(&mpath)?;
    let base = parent(&mpath);
    let mut backbone = backbone(&c.model)?;
    let (h, w) = backbone.pixel_size();
    let mut examples = Vec::new();
    let mut negatives = 0;
    for r in &manifest.records {
        if r.mask_path.is_none() {
            negatives += 1;
            continue;
        }
        examples.push(TrainExample::load(r, &base, w, h)?);
    }
    if negatives > 0 {
        log::warn!("skipping {negatives} records without a mask");
    }
    timer.lap("load");

    let adapters = AdapterSet::init(
        default_schedule(),
        backbone.denoiser.tap_points(),
        AdapterConfig::default(),
    )?;
    let policy = FreezePolicy::default();
    let mut before = backbone.params();
    before.extend(adapters.params.clone());
    let mode = if restart {
        ResumeMode::Restart
    } else {
        ResumeMode::Resume
    };
    let summary = run_training(
        &mut backbone,
        adapters,
        &examples,
        &c.train.config,
        &policy,
        &out,
        mode,
    )?;
    timer.lap("train");

    let mut after = backbone.params();
    after.extend(summary.adapters.params.clone());
    let report = verify_freeze(&before, &after, &policy)?;
    if !report.drifted.is_empty() || !report.missing.is_empty() {
        return Err(CliError::Internal(format!("freeze check failed: {report}")));
    }
    if report.no_op_training() {
        log::warn!("{report}");
    }
    let adapters_path = out.join("adapters.json");
    summary.adapters.save(&adapters_path)?;
    timer.lap("save");
    Ok(json!({
        "examples": examples.len(),
        "skipped_negatives": negatives,
        "start_iter": summary.start_iter,
        "final_iter": summary.final_iter,
        "last_loss": summary.losses.last(),
        "checkpoints": summary.checkpoints,
        "adapters": adapters_path,
    }))
}

/// Mask PNGs in `dir`, by file name.
fn mask_pool(dir: &Path) -> Result<Vec<BinaryMask>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::User(format!("mask dir {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::User(format!("no mask PNGs in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| BinaryMask::load(p, DEFAULT_THRESHOLD).map_err(CliError::from))
        .collect()
}

fn generate(loaded: &Loaded, timer: &mut Timer) -> Outcome {
    check(loaded)?;
    let c = &loaded.config;
    let g = &c.generate;
    let bg_path = need(
        loaded,
        &g.backgrounds,
        "backgrounds",
        "generate.backgrounds",
    )?;
    let mask_dir = need(loaded, &g.masks, "masks", "generate.masks")?;
    let ckpt = need(loaded, &g.checkpoint, "ckpt", "generate.checkpoint")?;
    let out = need(loaded, &g.out, "out", "generate.out")?;
    let backgrounds = read_manifest(&bg_path)?;
    let pool = mask_pool(&mask_dir)?;
    let adapters = AdapterSet::load(&ckpt)?;
    let backbone = backbone(&c.model)?;
    timer.lap("load");

    let pairs = pair_masks(
        &backgrounds,
        pool.len(),
        g.config.masks_per_background,
        g.config.seed,
    )?;
    let rep = generate_batch(
        &pairs,
        &pool,
        &backbone,
        &adapters,
        &CaptionRewriter::default(),
        &g.config,
        &parent(&bg_path),
        &out,
    )?;
    timer.lap("generate");
    Ok(json!({
        "pairs": pairs.len(),
        "records": rep.manifest.len(),
        "quarantined": rep.quarantined.len(),
        "manifest": out.join("manifest.jsonl"),
    }))
}

fn score(loaded: &Loaded, timer: &mut Timer) -> Outcome {
    check(loaded)?;
    let s = &loaded.config.score;
    let mpath = need(loaded, &s.manifest, "manifest", "score.manifest")?;
    let out = need(loaded, &s.out, "out", "score.out")?;
    let manifest = read_manifest(&mpath)?;
    let records = score_candidates(&manifest, &parent(&mpath), &MockScorer, &s.config, &out)?;
    timer.lap("score");
    Ok(json!({
        "scored": records.iter().filter(|r| !r.quarantined).count(),
        "quarantined": records.iter().filter(|r| r.quarantined).count(),
        "results": out,
    }))
}

fn select(loaded: &Loaded, timer: &mut Timer) -> Outcome {
    check(loaded)?;
    let s = &loaded.config.select;
    let spath = need(loaded, &s.scores, "scores", "select.scores")?;
    let mpath = need(loaded, &s.manifest, "manifest", "select.manifest")?;
    let out = need(loaded, &s.out, "out", "select.out")?;
    if !spath.is_file() {
        return Err(CliError::User(format!(
            "scores {} do not exist",
            spath.display()
        )));
    }
    // The results file is append-only; the last line for an id wins.
    let mut latest: HashMap<String, ScoreRecord> = HashMap::new();
    let mut order = Vec::new();
    for r in read_jsonl::<ScoreRecord>(&spath)? {
        if !latest.contains_key(&r.sample_id) {
            order.push(r.sample_id.clone());
        }
        latest.insert(r.sample_id.clone(), r);
    }
    let mut candidates = Vec::new();
    let mut quarantined = 0;
    for id in &order {
        let r = &latest[id];
        if r.quarantined {
            quarantined += 1;
        } else {
            candidates.push(r.clone());
        }
    }
    if candidates.is_empty() {
        return Err(CliError::User("no scored candidates to select from".into()));
    }
    let manifest = read_manifest(&mpath)?;
    let selection = select_top(&candidates, s.fraction)?;
    let selected = rebase(selected_manifest(&selection, &manifest)?, &parent(&mpath));
    selected.write(&out)?;
    timer.lap("select");
    Ok(json!({
        "candidates": candidates.len(),
        "excluded_quarantined": quarantined,
        "selected": selected.len(),
        "manifest": out,
    }))
}

fn export(loaded: &Loaded, timer: &mut Timer) -> Outcome {
    check(loaded)?;
    let e = &loaded.config.export;
    let mpath = need(loaded, &e.manifest, "manifest", "export.manifest")?;
    let out = need(loaded, &e.out, "out", "export.out")?;
    let synthetic = rebase(read_manifest(&mpath)?, &parent(&mpath));
    let manifest = match &e.mix.real {
        Some(r) => {
            let rpath = loaded.path(r);
            let real = rebase(read_manifest(&rpath)?, &parent(&rpath));
            mix_datasets(
                &real,
                &synthetic,
                e.mix.ratio_real_synth,
                e.mix.ratio_pos_neg,
                loaded.config.global.seed,
                e.mix.total,
            )?
        }
        None => synthetic,
    };
    timer.lap("load");
    let summary = export_yolo(&manifest, &parent(&mpath), &out, &e.config)?;
    manifest.write(&out.join("manifest.jsonl"))?;
    timer.lap("export");
    Ok(json!({
        "images": summary.images,
        "positives": summary.positives,
        "negatives": summary.negatives,
        "out": out,
    }))
}

fn eval(loaded: &Loaded, timer: &mut Timer) -> Outcome {
    check(loaded)?;
    let e = &loaded.config.eval;
    let gpath = need(loaded, &e.generated, "generated", "eval.generated")?;
    let rpath = need(loaded, &e.reference, "reference", "eval.reference")?;
    let out = need(loaded, &e.out, "out", "eval.out")?;
    let generated = read_manifest(&gpath)?;
    let reference = read_manifest(&rpath)?;
    let report = evaluate_pairs(
        &generated,
        &parent(&gpath),
        &reference,
        &parent(&rpath),
        EvalClients::default(),
        &e.config,
    )?;
    timer.lap("eval");
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)
            .map_err(|err| CliError::User(format!("{}: {err}", d.display())))?;
    }
    write_atomic(&out, report.to_json()?.as_bytes())?;
    let csv = out.with_extension("csv");
    write_atomic(&csv, report.to_csv().as_bytes())?;
    Ok(json!({
        "rows": report.rows.len(),
        "excluded": report.excluded.len(),
        "aggregate": report.aggregate,
        "report": out,
        "csv": csv,
    }))
}

fn annotate(loaded: &Loaded, timer: &mut Timer) -> Outcome {
    let a = &loaded.config.annotate;
    let mpath = need(loaded, &a.manifest, "manifest", "annotate.manifest")?;
    let manifest = read_manifest(&mpath)?;
    let base = parent(&mpath);
    let annotations = a
        .annotations
        .as_ref()
        .map(|p| loaded.path(p))
        .unwrap_or_else(|| base.join("annotations.jsonl"));
    let ui_dir = a.ui_dir.as_ref().map(|p| loaded.path(p));
    let addr = a.addr.clone().unwrap_or_else(|| DEFAULT_ADDR.into());
    let store = Arc::new(AnnotationStore::open(&manifest, &base, &annotations)?);
    timer.lap("load");

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(format!("runtime: {e}")))?;
    let progress = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::User(format!("cannot bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| CliError::Internal(format!("local address: {e}")))?;
        println!("listening on http://{local}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        server::serve(
            listener,
            server::router(store.clone(), ui_dir),
            shutdown_signal(),
        )
        .await
        .map_err(|e| CliError::Internal(format!("server: {e}")))?;
        Ok::<_, CliError>(store.progress())
    })?;
    timer.lap("serve");
    Ok(json!({
        "scored": progress.scored,
        "total": progress.total,
        "annotations": annotations,
    }))
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn validate(loaded: &Loaded, timer: &mut Timer) -> Outcome {
    if loaded.explicit_config().is_none() {
        return Err(CliError::User("missing required flag --config".into()));
    }
    let mut errs = loaded.check_stages();
    if !loaded.root.is_dir() {
        errs.push(format!(
            "global.data_root: {} is not a directory",
            loaded.root.display()
        ));
    }
    let inputs = loaded.inputs();
    for (key, path) in &inputs {
        if !path.exists() {
            errs.push(format!("{key}: {} does not exist", path.display()));
            continue;
        }
        match *key {
            "prep.detections" => {
                if let Err(e) = read_detections(path) {
                    errs.push(format!("{key}: {e}"));
                }
            }
            "generate.checkpoint" => {
                if let Err(e) = AdapterSet::load(path) {
                    errs.push(format!("{key}: {e}"));
                }
            }
            "generate.masks" => {
                if let Err(e) = mask_pool(path) {
                    errs.push(format!("{key}: {e}"));
                }
            }
            "select.scores" => {
                if let Err(e) = read_jsonl::<ScoreRecord>(path) {
                    errs.push(format!("{key}: {e}"));
                }
            }
            "annotate.ui_dir" => {}
            _ => match Manifest::read(path) {
                Ok(m) => {
                    let v = validate_manifest(&m, &parent(path));
                    if let Some(first) = v.first() {
                        errs.push(format!("{key}: {} problem(s), first: {first}", v.len()));
                    }
                }
                Err(e) => errs.push(format!("{key}: {e}")),
            },
        }
    }
    timer.lap("validate");
    if errs.is_empty() {
        Ok(json!({ "ok": true, "inputs_checked": inputs.len() }))
    } else {
        for e in &errs {
            eprintln!("  {e}");
        }
        Err(CliError::User(format!(
            "config has {} problem(s)",
            errs.len()
        )))
    }
}
