//! Command-line front end. Every subcommand reads one TOML config; flags only
//! override individual keys.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::conformal::{calibrate, calibrate_with_fallback, calibrated_interval, CalibrationResult};
use crate::data::{
    chronological_split, encode_dataset, fit_schema, ingest_csv, ingest_records, random_split, write_csv,
    EncodedSet, Splits,
};
use crate::error::{Error, Result};
use crate::evaluation::full_report;
use crate::model::DelayModel;
use crate::synthgen::generate;
use crate::training::{train_two_stage, write_history, EVAL_CHUNK};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_MISSING_ARTIFACT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "shipdelay", version, about = "Multi-task delivery-delay prediction with calibrated intervals")]
pub struct Cli {
    /// Run configuration (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, short, global = true, default_value = "shipdelay.toml")]
    pub config: PathBuf,
    /// Overrides the generator and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Downgrade hyperparameter range violations to warnings.
    #[arg(long, global = true)]
    pub allow_out_of_range: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shipment CSV.
    GenData {
        /// Output CSV; defaults to `data.path`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the schema and run both training stages.
    Train,
    /// Compute per-head conformal corrections on the calibration split.
    Calibrate,
    /// Report point and interval metrics on the test split.
    Evaluate {
        /// Also write the JSON report.
        #[arg(long)]
        json: bool,
    },
    /// Predict delays and intervals for every row of a CSV.
    Predict {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `output.predictions`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Maps an error onto the documented exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING_ARTIFACT,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_ARTIFACT,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Loaded config plus the directory its relative paths hang off.
pub struct Context {
    pub cfg: RunConfig,
    pub base: PathBuf,
}

impl Context {
    pub fn load(cli: &Cli) -> Result<Self> {
        let (mut cfg, base) = RunConfig::load(&cli.config)?;
        if let Some(seed) = cli.seed {
            cfg.override_seed(seed);
        }
        cfg.check(cli.allow_out_of_range)?;
        Ok(Self { cfg, base })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        RunConfig::resolve(&self.base, p)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.path(&self.cfg.output.checkpoint)
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::GenData { out } => cmd_gen_data(&ctx, out.as_deref()),
        Command::Train => cmd_train(&ctx),
        Command::Calibrate => cmd_calibrate(&ctx),
        Command::Evaluate { json } => cmd_evaluate(&ctx, *json),
        Command::Predict { input, output } => cmd_predict(&ctx, input, output.as_deref()),
    }
}

pub fn cmd_gen_data(ctx: &Context, out: Option<&Path>) -> Result<()> {
    let path = out.map_or_else(|| ctx.path(&ctx.cfg.data.path), Path::to_path_buf);
    let data = generate(&ctx.cfg.generator)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = write_csv(&data, &ctx.cfg.data.columns, &path, &ctx.cfg.preamble())?;
    println!(
        "wrote {n} rows to {} (delay rate {:.4})",
        path.display(),
        data.delay_rate()
    );
    Ok(())
}

/// Reads the configured dataset and splits it.
pub fn load_splits(ctx: &Context) -> Result<Splits> {
    let path = ctx.path(&ctx.cfg.data.path);
    let ing = ingest_csv(&path, &ctx.cfg.data.columns)?;
    if ing.skipped > 0 {
        log::warn!("skipped {} malformed rows in {}", ing.skipped, path.display());
    }
    if ctx.cfg.data.shuffle_time {
        random_split(&ing.data, &ctx.cfg.data.split, ctx.cfg.training.seed)
    } else {
        chronological_split(&ing.data, &ctx.cfg.data.split)
    }
}

pub fn cmd_train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let splits = load_splits(ctx)?;
    let schema = fit_schema(&splits.train, &cfg.data.columns)?;
    for w in &schema.warnings {
        log::warn!("{w}");
    }
    let train = encode_dataset(&splits.train, &schema)?;
    let val = encode_dataset(&splits.val, &schema)?;
    let mut model = DelayModel::new(&cfg.architecture, &schema.cardinalities(), schema.n_numerical(), cfg.training.seed)?;
    log::info!(
        "training on {} rows ({} validation), {} parameters",
        train.len(),
        val.len(),
        model.num_parameters()
    );
    let run = train_two_stage(&mut model, &train, &val, &cfg.training)?;

    let ck_path = ctx.checkpoint_path();
    let stale = checkpoint::calibration_path(&ck_path);
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        log::info!("removed calibration for the previous checkpoint");
    }
    Checkpoint::from_model(
        &model,
        &schema,
        Some(run.stage2.optimizer.clone()),
        Some(run.stage2.rng.clone()),
        cfg.echo(),
    )
    .save(&ck_path)?;
    write_history(run.history(), &ctx.path(&cfg.output.history), &cfg.preamble())?;
    println!(
        "stage 1: best val L_c {:.5} at epoch {} of {}; stage 2: best val L_r {:.5} at epoch {} of {}",
        run.stage1.best_val,
        run.stage1.best_epoch,
        run.stage1.epochs_run,
        run.stage2.best_val,
        run.stage2.best_epoch,
        run.stage2.epochs_run
    );
    println!("checkpoint written to {}", ck_path.display());
    Ok(())
}

fn load_model(ctx: &Context) -> Result<(Checkpoint, DelayModel)> {
    let ck = Checkpoint::load(&ctx.checkpoint_path())?;
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn encoded_split(ctx: &Context, ck: &Checkpoint, pick: impl Fn(&Splits) -> &crate::data::Dataset) -> Result<EncodedSet> {
    let splits = load_splits(ctx)?;
    encode_dataset(pick(&splits), &ck.schema)
}

pub fn cmd_calibrate(ctx: &Context) -> Result<()> {
    let (ck, model) = load_model(ctx)?;
    let calib = encoded_split(ctx, &ck, |s| &s.calib)?;
    let alpha = ctx.cfg.conformal.alpha;
    let result = if ctx.cfg.conformal.allow_empty_subset {
        calibrate_with_fallback(&model, &calib, alpha)?
    } else {
        calibrate(&model, &calib, alpha)?
    };
    let path = checkpoint::save_calibration(&ctx.checkpoint_path(), &result, ctx.cfg.echo())?;
    println!(
        "alpha {}: q_hat delayed {:.5} (n={}), q_hat on-time {:.5} (n={}){}",
        result.alpha,
        result.q_hat_delayed,
        result.n_delayed,
        result.q_hat_ontime,
        result.n_ontime,
        if result.fallback { " [fallback]" } else { "" }
    );
    println!("calibration written to {}", path.display());
    Ok(())
}

pub fn cmd_evaluate(ctx: &Context, json: bool) -> Result<()> {
    let (ck, model) = load_model(ctx)?;
    let calibration = checkpoint::load_calibration(&ctx.checkpoint_path())?;
    if calibration.is_none() {
        log::warn!("no calibration found; reporting pre-calibration rows only");
    }
    let test = encoded_split(ctx, &ck, |s| &s.test)?;
    let report = full_report(&model, calibration.as_ref(), &test, ctx.cfg.conformal.alpha)?;
    report.write_csv(&ctx.path(&ctx.cfg.output.report_csv), &ctx.cfg.preamble())?;
    if json {
        let text = report.to_json(&ctx.cfg.echo())?;
        checkpoint::write_atomic(&ctx.path(&ctx.cfg.output.report_json), text.as_bytes())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_predict(ctx: &Context, input: &Path, output: Option<&Path>) -> Result<()> {
    let (ck, model) = load_model(ctx)?;
    let calibration = checkpoint::load_calibration(&ctx.checkpoint_path())?;
    let ing = ingest_records(input, &ctx.cfg.data.columns)?;
    if ing.skipped > 0 {
        log::warn!("skipped {} malformed rows in {}", ing.skipped, input.display());
    }
    let set = EncodedSet::from_records(&ing.data, &ck.schema)?;
    let preds = model.predict(&set, EVAL_CHUNK)?;
    let cal = calibration.unwrap_or_else(|| {
        log::warn!("no calibration found; intervals are the raw outer quantiles");
        CalibrationResult::uncalibrated(ctx.cfg.conformal.alpha)
    });

    let mut buf: Vec<u8> = Vec::new();
    for line in ctx.cfg.preamble() {
        writeln!(buf, "# {line}").expect("write to Vec");
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "planned_arrival",
            "actual_delay_days",
            "delay_probability",
            "predicted_is_delayed",
            "q10",
            "q50",
            "q90",
            "calibrated_low",
            "calibrated_high",
            "interval_collapsed",
            "routed_head",
        ])?;
        for (rec, p) in ing.data.iter().zip(&preds) {
            let iv = calibrated_interval(p, &cal);
            let actual = rec
                .actual_arrival
                .map(|a| crate::data::derive_label(rec.planned_arrival, a).delay_days.to_string())
                .unwrap_or_default();
            w.write_record([
                rec.planned_arrival.to_string(),
                actual,
                p.delay_prob.to_string(),
                p.predicted_delayed.to_string(),
                p.quantiles[0].to_string(),
                p.quantiles[1].to_string(),
                p.quantiles[2].to_string(),
                iv.low.to_string(),
                iv.high.to_string(),
                iv.collapsed.to_string(),
                if p.predicted_delayed { "delayed" } else { "ontime" }.to_string(),
            ])?;
        }
        w.flush().expect("write to Vec");
    }
    let out = output.map_or_else(|| ctx.path(&ctx.cfg.output.predictions), Path::to_path_buf);
    checkpoint::write_atomic(&out, &buf)?;
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}
