//! The `smokeforge` command line: one subcommand per pipeline stage plus
//! config validation and the annotation service.
//!
//! Exit codes: 0 success, 1 user error (bad flags, config or inputs),
//! 2 internal error. Every parsed invocation leaves a JSON run record.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

mod commands;
pub mod config;
pub mod record;
pub mod server;

use config::Loaded;

#[derive(Debug, Parser)]
#[command(
    name = "smokeforge",
    version,
    about = "Synthetic smoke dataset factory"
)]
pub struct Cli {
    /// Pipeline config file (TOML); flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `global.seed` and every stage seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory for run records.
    #[arg(long, global = true)]
    pub records_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build (image, mask, caption) training triples from detection boxes.
    Prep {
        /// JSONL of {id, image_path, bboxes}.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train injection adapters on a training manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Discard existing checkpoints instead of resuming.
        #[arg(long)]
        restart: bool,
    },
    /// Inpaint smoke into backgrounds.
    Generate {
        #[arg(long)]
        backgrounds: Option<PathBuf>,
        /// Directory of mask PNGs.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Adapter checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated samples.
    Score {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Results JSONL; an existing file is resumed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the top-scoring fraction of a generated manifest.
    Select {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a YOLO detection dataset, optionally mixed with real data.
    Export {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Real manifest to mix in.
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        total: Option<usize>,
    },
    /// Compare generated images with references of the same id.
    Eval {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Report JSON; a CSV is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the human annotation API.
    AnnotateServe {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to annotations.jsonl beside the manifest.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Defaults to 127.0.0.1:8787.
        #[arg(long)]
        addr: Option<String>,
        /// Static files served at the root.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Check a config file and every path it references.
    Validate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prep { .. } => "prep",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Score { .. } => "score",
            Command::Select { .. } => "select",
            Command::Export { .. } => "export",
            Command::Eval { .. } => "eval",
            Command::AnnotateServe { .. } => "annotate-serve",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<smokeforge::Error> for CliError {
    fn from(e: smokeforge::Error) -> Self {
        use smokeforge::Error as E;
        let user = match &e {
            E::InvalidInput(_)
            | E::InvalidConfig(_)
            | E::InvalidStep { .. }
            | E::NoForeground
            | E::Capacity { .. }
            | E::Checkpoint { .. }
            | E::Json(_) => true,
            E::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound
                    | std::io::ErrorKind::PermissionDenied
                    | std::io::ErrorKind::InvalidData
            ),
            E::Image(img) => matches!(
                img,
                image::ImageError::Decoding(_)
                    | image::ImageError::Unsupported(_)
                    | image::ImageError::IoError(_)
            ),
            _ => false,
        };
        if user {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

/// Parses `args` (program name first) and runs the command. Relative flag
/// paths resolve against `cwd`. Returns the process exit code.
pub fn run_in<I, T>(args: I, cwd: &Path) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let mut timer = record::Timer::start();

    let loaded = load_config(&cli, cwd);
    timer.lap("config");
    let (result, loaded) = match loaded {
        Ok(mut loaded) => {
            let r = commands::dispatch(&cli.command, &mut loaded, cwd, &mut timer);
            (r, Some(loaded))
        }
        Err(e) => (Err(e), None),
    };
    let code = match &result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    if let Ok(out) = &result {
        println!("{out}");
    }

    let records_dir = match (&cli.records_dir, &loaded) {
        (Some(d), _) => cwd.join(d),
        (None, Some(l)) => l.path(&l.config.global.records_dir),
        (None, None) => cwd.join(config::Global::default().records_dir),
    };
    let rec = record::RunRecord::finish(
        cli.command.name(),
        argv,
        loaded.as_ref().map(|l| &l.config),
        cwd,
        timer,
        code,
        &result,
    );
    match rec.write(&records_dir) {
        Ok(_) => code,
        Err(e) => {
            eprintln!("error: cannot write run record: {e}");
            if code == 0 {
                2
            } else {
                code
            }
        }
    }
}

/// [`run_in`] from the process working directory.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match std::env::current_dir() {
        Ok(cwd) => run_in(args, &cwd),
        Err(e) => {
            eprintln!("error: no working directory: {e}");
            2
        }
    }
}

fn load_config(cli: &Cli, cwd: &Path) -> Result<Loaded, CliError> {
    let mut loaded = match &cli.config {
        Some(p) => Loaded::load(&cwd.join(p))?,
        None => Loaded::defaults(cwd),
    };
    if let Some(s) = cli.seed {
        loaded.override_seed(s);
    }
    if let Some(w) = cli.workers {
        loaded.override_workers(w);
    }
    Ok(loaded)
}
