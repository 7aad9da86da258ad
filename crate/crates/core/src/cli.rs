//! Command implementations behind the `srncd` binary.
//!
//! Every command reads a flat TOML file (optional) whose keys are
//! overridden one-to-one by command-line flags, and writes the effective
//! settings to `config_echo.toml` next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{dataset_stats, split_dataset, Dataset, SplitRatios};
use crate::diagnet::{proficiency_matrix, InteractionSign, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::metrics::{histogram, EvalReport, ProficiencyHistogram, DEFAULT_DOA_SAMPLE_CAP};
use crate::synthcohort::{generate, ground_truth_doa, write_cohort, SynthConfig};
use crate::training::{
    check_gradients, evaluate, train, train_log_csv, Checkpoint, GroupCheck, TrainConfig,
};

pub const CHECKPOINT_FILE: &str = "model.srncd";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CONFIG_ECHO_FILE: &str = "config_echo.toml";

/// Settings shared by `train`, `eval` and `check-grad`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub responses: Option<PathBuf>,
    pub q_matrix: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub split_seed: u64,
    /// Student pairs per concept above which DOA is sampled; 0 means exact.
    pub doa_sample_cap: u64,
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub emb_dim: Option<usize>,
    pub interaction_sign: InteractionSign,
    pub early_stop_patience: usize,
    pub dropout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let r = SplitRatios::default();
        Self {
            responses: None,
            q_matrix: None,
            hierarchy: None,
            output_dir: PathBuf::from("out"),
            train_ratio: r.train,
            valid_ratio: r.valid,
            test_ratio: r.test,
            split_seed: 0,
            doa_sample_cap: DEFAULT_DOA_SAMPLE_CAP,
            variant: t.variant,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            seed: t.seed,
            hidden_dims: t.hidden_dims,
            emb_dim: t.emb_dim,
            interaction_sign: t.interaction_sign,
            early_stop_patience: t.early_stop_patience,
            dropout: t.dropout,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            hidden_dims: self.hidden_dims.clone(),
            emb_dim: self.emb_dim,
            interaction_sign: self.interaction_sign,
            early_stop_patience: self.early_stop_patience,
            dropout: self.dropout,
        }
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            valid: self.valid_ratio,
            test: self.test_ratio,
        }
    }

    pub fn sample_cap(&self) -> Option<u64> {
        (self.doa_sample_cap > 0).then_some(self.doa_sample_cap)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let responses = self
            .responses
            .as_deref()
            .ok_or_else(|| Error::Config("`responses` path is not set".into()))?;
        let q = self
            .q_matrix
            .as_deref()
            .ok_or_else(|| Error::Config("`q_matrix` path is not set".into()))?;
        Dataset::load(responses, q, self.hierarchy.as_deref())
    }
}

// ---------------------------------------------------------------------------
// Config files and overrides
// ---------------------------------------------------------------------------

/// Read an optional TOML file, overlay non-empty flags, and deserialize.
pub fn resolve_config<C: DeserializeOwned, F: Serialize>(
    file: Option<&Path>,
    flags: &F,
) -> Result<C> {
    let mut table = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let overrides = toml::Table::try_from(flags).map_err(|e| Error::Config(e.to_string()))?;
    table.extend(overrides);
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_echo<C: Serialize>(dir: &Path, cfg: &C) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join(CONFIG_ECHO_FILE), &text)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub struct TrainSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let tc = cfg.train_config();
    tc.validate()?;
    let dataset = cfg.load_dataset()?;
    info!("dataset:\n{}", dataset_stats(&dataset));
    let split = split_dataset(&dataset.logs, cfg.ratios(), cfg.split_seed)?;
    let out = train(&dataset, &split, &tc)?;

    ensure_dir(&cfg.output_dir)?;
    // Where the files go is not part of the model; leaving it out keeps
    // checkpoints of identical runs identical.
    let mut run = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(obj) = run.as_object_mut() {
        obj.remove("output_dir");
    }
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    Checkpoint::new(out.params, &dataset.ids, &tc, run).save(&checkpoint)?;
    write_text(
        &cfg.output_dir.join(TRAIN_LOG_FILE),
        &train_log_csv(&out.log),
    )?;
    write_echo(&cfg.output_dir, cfg)?;
    Ok(TrainSummary {
        best_epoch: out.best_epoch,
        epochs_run: out.log.len(),
        checkpoint,
    })
}

/// Evaluate a checkpoint on the test split of the configured data.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = cfg.load_dataset()?;
    ckpt.check_dataset(&dataset)?;
    let split = split_dataset(&dataset.logs, cfg.ratios(), cfg.split_seed)?;
    let report = evaluate(
        &ckpt.params,
        &dataset.q,
        &split.train,
        &split.test,
        cfg.sample_cap(),
        cfg.split_seed,
    )?;

    ensure_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("eval_report.txt"), &report.to_kv())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&cfg.output_dir.join("eval_report.json"), &(json + "\n"))?;
    let concept_ids: Vec<String> = dataset.ids.concepts.iter().cloned().collect();
    write_text(
        &cfg.output_dir.join("per_concept_doa.csv"),
        &report.per_concept_csv(&concept_ids),
    )?;
    write_echo(
        &cfg.output_dir,
        &EvalEcho {
            checkpoint: checkpoint.to_owned(),
            run: cfg.clone(),
        },
    )?;
    Ok(report)
}

#[derive(Serialize)]
struct EvalEcho {
    checkpoint: PathBuf,
    #[serde(flatten)]
    run: RunConfig,
}

/// `student_id,concept_id,proficiency` rows for the requested students
/// (all when `students` is empty).
pub fn proficiency_csv(ckpt: &Checkpoint, students: &[String]) -> Result<String> {
    let ids = &ckpt.header.student_ids;
    let rows: Vec<usize> = if students.is_empty() {
        (0..ids.len()).collect()
    } else {
        students
            .iter()
            .map(|s| {
                ids.iter()
                    .position(|x| x == s)
                    .ok_or_else(|| Error::UnknownStudent(s.clone()))
            })
            .collect::<Result<_>>()?
    };
    let h = proficiency_matrix(&ckpt.params)?;
    let mut out = String::from("student_id,concept_id,proficiency\n");
    for i in rows {
        for (k, concept) in ckpt.header.concept_ids.iter().enumerate() {
            writeln!(out, "{},{},{}", ids[i], concept, h.get(i, k)).expect("write to string");
        }
    }
    Ok(out)
}

pub fn cmd_diagnose(checkpoint: &Path, students: &[String], output: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let csv = proficiency_csv(&ckpt, students)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(output, &csv)
}

pub fn cmd_histogram(checkpoint: &Path, output: &Path) -> Result<ProficiencyHistogram> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let hist = histogram(&proficiency_matrix(&ckpt.params)?);
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(output, &hist.to_csv())?;
    Ok(hist)
}

pub fn cmd_synth(cfg: &SynthConfig, dir: &Path) -> Result<Dataset> {
    let (dataset, gt) = generate(cfg)?;
    write_cohort(&dataset, &gt, dir)?;
    write_echo(dir, cfg)?;
    info!(
        "wrote synthetic cohort to {} (ground-truth DOA {:?})",
        dir.display(),
        ground_truth_doa(&gt, &dataset)
    );
    Ok(dataset)
}

/// Gradient-check settings; model and data come from the [`RunConfig`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub coords_per_group: usize,
    pub step: f64,
    pub batch_size: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coords_per_group: 50,
            step: 1e-3,
            batch_size: 64,
        }
    }
}

/// Synthetic cohort used by `check-grad` when no data paths are given.
pub fn gradcheck_cohort() -> SynthConfig {
    SynthConfig {
        n_students: 24,
        n_exercises: 30,
        n_concepts: 10,
        n_parents: 3,
        concepts_per_exercise: (1, 3),
        logs_per_student: (8, 12),
        noise_sd: 0.1,
        seed: 0,
    }
}

/// Check one freshly initialized model (seeded by `cfg.seed`) on a batch
/// drawn from the training split.
pub fn cmd_check_grad(cfg: &RunConfig, opts: &GradCheckOptions) -> Result<Vec<GroupCheck>> {
    let dataset = if cfg.responses.is_some() {
        cfg.load_dataset()?
    } else {
        generate(&gradcheck_cohort())?.0
    };
    let tc = cfg.train_config();
    tc.validate()?;
    let params = ModelParams::init(&tc.architecture(&dataset)?, cfg.seed)?;
    let split = split_dataset(&dataset.logs, cfg.ratios(), cfg.split_seed)?;
    let mut batch = split.train;
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        batch.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed));
    }
    batch.truncate(opts.batch_size.max(1));
    check_gradients(
        &params,
        &batch,
        &dataset.q,
        opts.coords_per_group,
        opts.step,
        cfg.seed,
    )
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "srncd",
    version,
    about = "Neural cognitive diagnosis with concept hierarchies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model.srncd, train_log.csv and config_echo.toml.
    Train {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Export per-student concept proficiencies.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated student ids; all students when omitted.
        #[arg(long, value_delimiter = ',')]
        students: Vec<String>,
        #[arg(long, default_value = "proficiency.csv")]
        output: PathBuf,
    },
    /// Export a 10-bin histogram of all proficiency values.
    Histogram {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "histogram.csv")]
        output: PathBuf,
    },
    /// Generate a synthetic cohort with known proficiencies.
    Synth {
        #[command(flatten)]
        synth: SynthFlags,
    },
    /// Compare analytic gradients with finite differences.
    CheckGrad {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value_t = 50)]
        coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long = "check-batch", default_value_t = 64)]
        check_batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Flags mirroring [`RunConfig`] keys; unset flags leave the file value.
#[derive(Debug, Default, Args, Serialize)]
pub struct RunFlags {
    /// TOML file with run settings.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub responses: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_matrix: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doa_sample_cap: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Comma-separated widths, e.g. `512,256`.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emb_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interaction_sign: Option<InteractionSign>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

impl RunFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        resolve_config(self.config.as_deref(), self)
    }
}

/// Flags mirroring [`SynthConfig`] keys.
#[derive(Debug, Default, Args, Serialize)]
pub struct SynthFlags {
    /// TOML file with generator settings.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory for the generated CSV files.
    #[arg(long, default_value = "synth")]
    #[serde(skip)]
    pub output_dir: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_students: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_exercises: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_concepts: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_parents: Option<usize>,
    /// Inclusive range as `min,max`.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concepts_per_exercise: Option<Vec<usize>>,
    /// Inclusive range as `min,max`.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logs_per_student: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SynthFlags {
    pub fn resolve(&self) -> Result<SynthConfig> {
        resolve_config(self.config.as_deref(), self)
    }
}

fn format_checks(checks: &[GroupCheck]) -> String {
    let mut out = String::from("group,coords,max_rel_error\n");
    for c in checks {
        writeln!(
            out,
            "{},{},{:.3e}",
            c.group, c.report.coords_checked, c.report.max_rel_error
        )
        .expect("write to string");
    }
    out
}

/// Run a parsed command line. The returned text goes to stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { run } => {
            let cfg = run.resolve()?;
            let s = cmd_train(&cfg)?;
            Ok(format!(
                "trained {} for {} epochs (best epoch {}); wrote {}\n",
                cfg.variant,
                s.epochs_run,
                s.best_epoch,
                s.checkpoint.display()
            ))
        }
        Command::Eval { checkpoint, run } => {
            let cfg = run.resolve()?;
            Ok(cmd_eval(&cfg, &checkpoint)?.to_kv())
        }
        Command::Diagnose {
            checkpoint,
            students,
            output,
        } => {
            cmd_diagnose(&checkpoint, &students, &output)?;
            Ok(format!("wrote {}\n", output.display()))
        }
        Command::Histogram { checkpoint, output } => {
            Ok(cmd_histogram(&checkpoint, &output)?.to_csv())
        }
        Command::Synth { synth } => {
            let cfg = synth.resolve()?;
            let d = cmd_synth(&cfg, &synth.output_dir)?;
            Ok(format!("{}\n", dataset_stats(&d)))
        }
        Command::CheckGrad {
            run,
            coords,
            step,
            check_batch,
            tolerance,
        } => {
            let cfg = run.resolve()?;
            let opts = GradCheckOptions {
                coords_per_group: coords,
                step,
                batch_size: check_batch,
            };
            let checks = cmd_check_grad(&cfg, &opts)?;
            let text = format_checks(&checks);
            let worst = checks
                .iter()
                .map(|c| c.report.max_rel_error)
                .fold(0.0, f64::max);
            if worst >= tolerance {
                return Err(Error::GradientMismatch(format!(
                    "gradient check failed: max relative error {worst:.3e} >= {tolerance:e}\n{text}"
                )));
            }
            Ok(text)
        }
    }
}
