//! Pipeline configuration file.
//!
//! One TOML file with a `[global]` table and one table per stage. Stage
//! tables hold the stage's input/output paths next to the library config
//! keys for that stage. Relative paths resolve against `global.data_root`,
//! which itself resolves against the directory holding the config file.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smokeforge::corpus::{ExportConfig, Ratio};
use smokeforge::evalkit::EvalConfig;
use smokeforge::filter::ScoreConfig;
use smokeforge::generator::GenConfig;
use smokeforge::prep::PrepConfig;
use smokeforge::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Global {
    pub seed: u64,
    pub workers: usize,
    pub data_root: PathBuf,
    /// Where run records go.
    pub records_dir: PathBuf,
}

impl Default for Global {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            data_root: PathBuf::from("."),
            records_dir: PathBuf::from(".smokeforge/runs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub schedule_steps: usize,
    /// Seed of the frozen backbone weights; training and generation must agree.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Toy,
            schedule_steps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segmenter {
    /// Returns the prompt box as the mask.
    #[default]
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepSection {
    pub detections: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub segmenter: Segmenter,
    /// Caption returned by the offline captioner.
    pub caption: String,
    #[serde(flatten)]
    pub config: PrepConfig,
}

impl Default for PrepSection {
    fn default() -> Self {
        Self {
            detections: None,
            out: None,
            segmenter: Segmenter::Box,
            caption: "smoke rising above a forest".into(),
            config: PrepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSection {
    pub backgrounds: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub config: GenConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreSection {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub config: ScoreConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectSection {
    pub scores: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub fraction: f64,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            scores: None,
            manifest: None,
            out: None,
            fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixSection {
    /// Real manifest mixed into the export; no mixing when unset.
    pub real: Option<PathBuf>,
    pub ratio_real_synth: Ratio,
    pub ratio_pos_neg: Ratio,
    pub total: Option<usize>,
}

impl Default for MixSection {
    fn default() -> Self {
        Self {
            real: None,
            ratio_real_synth: Ratio::one_to_one(),
            ratio_pos_neg: Ratio::one_to_one(),
            total: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportSection {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mix: MixSection,
    #[serde(flatten)]
    pub config: ExportConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub generated: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub config: EvalConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateSection {
    pub manifest: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub addr: Option<String>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub global: Global,
    pub model: ModelSection,
    pub prep: PrepSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub score: ScoreSection,
    pub select: SelectSection,
    pub export: ExportSection,
    pub eval: EvalSection,
    pub annotate: AnnotateSection,
}

/// A parsed config plus the keys that were written explicitly.
#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub config: PipelineConfig,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    source: Option<PathBuf>,
    explicit: Vec<String>,
}

impl Loaded {
    /// Defaults only, rooted at `cwd`.
    pub fn defaults(cwd: &Path) -> Self {
        Self {
            config: PipelineConfig::default(),
            root: cwd.to_path_buf(),
            source: None,
            explicit: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
        let mut loaded = Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?;
        loaded.source = Some(path.to_path_buf());
        Ok(loaded)
    }

    /// The file this config came from, if any.
    pub fn explicit_config(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Parses config text; `dir` is the directory the file lives in.
    pub fn parse(text: &str, dir: &Path) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::User(format!("config: {}", e.message())))?;
        let config: PipelineConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| CliError::User(format!("config: {}", e.message())))?;
        let known = toml::Value::try_from(&config)
            .map_err(|e| CliError::Internal(format!("config: {e}")))?;
        let mut unknown = Vec::new();
        unknown_keys(&table, known.as_table(), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::User(format!(
                "config: unknown keys {}",
                unknown.join(", ")
            )));
        }
        let mut explicit = Vec::new();
        for (stage, v) in &table {
            if let Some(t) = v.as_table() {
                explicit.extend(t.keys().map(|k| format!("{stage}.{k}")));
            }
        }
        let base = if dir.as_os_str().is_empty() {
            Path::new(".")
        } else {
            dir
        };
        let root = base.join(&config.global.data_root);
        let mut loaded = Self {
            config,
            root,
            source: None,
            explicit,
        };
        loaded.inherit();
        Ok(loaded)
    }

    fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    /// Copies global seed and worker count into stages that did not set their own.
    fn inherit(&mut self) {
        let g = self.config.global.clone();
        if !self.is_explicit("train.seed") {
            self.config.train.config.seed = g.seed;
        }
        if !self.is_explicit("generate.seed") {
            self.config.generate.config.seed = g.seed;
        }
        if !self.is_explicit("score.workers") {
            self.config.score.config.workers = g.workers;
        }
    }

    /// `--seed` beats every config key.
    pub fn override_seed(&mut self, seed: u64) {
        self.config.global.seed = seed;
        self.config.train.config.seed = seed;
        self.config.generate.config.seed = seed;
    }

    pub fn override_workers(&mut self, workers: usize) {
        self.config.global.workers = workers;
        self.config.score.config.workers = workers;
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        smokeforge::corpus::resolve(&self.root, p)
    }

    /// Every input path named in the config, with its key.
    pub fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let c = &self.config;
        let named: [(&'static str, &Option<PathBuf>); 12] = [
            ("prep.detections", &c.prep.detections),
            ("train.manifest", &c.train.manifest),
            ("generate.backgrounds", &c.generate.backgrounds),
            ("generate.masks", &c.generate.masks),
            ("generate.checkpoint", &c.generate.checkpoint),
            ("score.manifest", &c.score.manifest),
            ("select.scores", &c.select.scores),
            ("select.manifest", &c.select.manifest),
            ("export.manifest", &c.export.manifest),
            ("export.mix.real", &c.export.mix.real),
            ("eval.generated", &c.eval.generated),
            ("eval.reference", &c.eval.reference),
        ];
        let mut out: Vec<_> = named
            .into_iter()
            .filter_map(|(k, p)| p.as_ref().map(|p| (k, self.path(p))))
            .collect();
        if let Some(p) = &c.annotate.manifest {
            out.push(("annotate.manifest", self.path(p)));
        }
        if let Some(p) = &c.annotate.ui_dir {
            out.push(("annotate.ui_dir", self.path(p)));
        }
        out
    }

    /// Stage-level checks that need no file access.
    pub fn check_stages(&self) -> Vec<String> {
        let c = &self.config;
        let mut errs = Vec::new();
        let mut push = |stage: &str, r: smokeforge::Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{stage}: {e}"));
            }
        };
        push("model", check_model(&c.model));
        push("train", c.train.config.validate());
        push(
            "generate",
            c.generate.config.validate(c.model.schedule_steps),
        );
        push("prep", check_prep(&c.prep));
        push("score", check_score(&c.score.config));
        push(
            "select",
            smokeforge::filter::keep_count(1, c.select.fraction).map(|_| ()),
        );
        push("export", check_export(&c.export.config));
        push("eval", check_eval(&c.eval.config));
        if c.global.workers == 0 {
            errs.push("global: workers must be positive".into());
        }
        errs
    }
}

/// Keys of `given` that do not survive a parse and re-serialize round trip.
fn unknown_keys(
    given: &toml::Table,
    known: Option<&toml::Table>,
    prefix: &str,
    out: &mut Vec<String>,
) {
    for (k, v) in given {
        let key = format!("{prefix}{k}");
        match known.and_then(|t| t.get(k)) {
            None => out.push(key),
            Some(kv) => {
                if let Some(sub) = v.as_table() {
                    unknown_keys(sub, kv.as_table(), &format!("{key}."), out);
                }
            }
        }
    }
}

fn invalid(msg: &str) -> smokeforge::Result<()> {
    Err(smokeforge::Error::InvalidConfig(msg.into()))
}

fn check_model(m: &ModelSection) -> smokeforge::Result<()> {
    if m.schedule_steps < 2 {
        return invalid("schedule_steps must be at least 2");
    }
    Ok(())
}

fn check_prep(p: &PrepSection) -> smokeforge::Result<()> {
    if p.config.max_tokens == 0 {
        return invalid("max_tokens must be positive");
    }
    if p.caption.trim().is_empty() {
        return invalid("caption must not be empty");
    }
    Ok(())
}

fn check_score(s: &ScoreConfig) -> smokeforge::Result<()> {
    if s.workers == 0 || s.outage_after == 0 {
        return invalid("workers and outage_after must be positive");
    }
    if s.prompt.trim().is_empty() {
        return invalid("prompt must not be empty");
    }
    Ok(())
}

fn check_export(e: &ExportConfig) -> smokeforge::Result<()> {
    if e.jpeg_quality == 0 || e.jpeg_quality > 100 {
        return invalid("jpeg_quality must be in 1..=100");
    }
    if e.class_name.trim().is_empty() {
        return invalid("class_name must not be empty");
    }
    Ok(())
}

fn check_eval(e: &EvalConfig) -> smokeforge::Result<()> {
    if e.ssim.window == 0 {
        return invalid("ssim.window must be positive");
    }
    Ok(())
}
