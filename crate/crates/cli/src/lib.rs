//! Command-line front end. Every verb is a thin wrapper over a library call.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fpdanet::checkpoint::load_checkpoint;
use fpdanet::data::{scan_dataset, synth_generate, DatasetManifest, Split, SynthSpec};
use fpdanet::metrics::{parse_report_csv, render_report, ReportFormat};
use fpdanet::predict::predict_image;
use fpdanet::schedule::{lr_csv, Scaling};
use fpdanet::trainer::{evaluate_model, stats_from_metadata, train_with_observer, TrainConfig};
use fpdanet::{Error, ModelConfig, Preset, Scalar};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "FPDANET_CONFIG";

/// Exit status for bad flags, unknown verbs or unknown config keys.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for failures while running a verb.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "fpdanet", version, about = "Fetal ultrasound section classifier")]
pub struct Cli {
    /// TOML config with [model], [train] and [synth] tables.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    /// Dotted-key override, e.g. `model.fpan.fused_width=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Render a synthetic dataset in the <root>/<ABBREV>/*.png layout.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Rank classes for one image.
    Predict(PredictArgs),
    /// Print the per-epoch learning rate as CSV.
    LrDump(LrDumpArgs),
    /// Re-render a CSV evaluation report as text, CSV or SVG.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Speckle standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest file, or a dataset root to scan.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Full,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Text,
    Csv,
    Svg,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Text => ReportFormat::Text,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Svg => ReportFormat::Svg,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest file, or a dataset root to scan.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    /// Output file; the report goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct LrDumpArgs {
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Use the as-written fraction `batch / (nbs · lr_init)`.
    #[arg(long)]
    pub literal: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// CSV report written by `eval --format csv`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything a config file may set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl AppConfig {
    fn base(preset: Preset) -> Self {
        AppConfig { model: ModelConfig::preset(preset), train: TrainConfig::default(), synth: SynthSpec::default() }
    }

    /// Defaults for the chosen `model.preset` (desk when unset), overlaid
    /// with the file contents and then the overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut user = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let preset = match user.get("model").and_then(|m| m.get("preset")) {
            None => Preset::Desk,
            Some(v) => v.clone().try_into().map_err(|e| Error::Config(format!("model.preset: {e}")))?,
        };
        let mut merged = toml::Table::try_from(Self::base(preset)).expect("defaults serialize");
        merge(&mut merged, user);
        let cfg: AppConfig = toml::Value::Table(merged).try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Set `a.b.c=value`; the value is read as TOML and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Error> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, Error> {
    if path.is_dir() {
        let file = path.join(fpdanet::data::synth::MANIFEST_FILE);
        if file.is_file() {
            DatasetManifest::read(&file)
        } else {
            scan_dataset(path)
        }
    } else {
        DatasetManifest::read(path)
    }
}

fn stdout_error(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn write_or_print(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => out.write_all(text.as_bytes()).map_err(stdout_error),
    }
}

/// Parse `argv` (including the program name), run the verb, and return the
/// process exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let cfg = match AppConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}\n\nSee `fpdanet --help` for usage.");
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.verb, cfg, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(verb: Verb, mut cfg: AppConfig, out: &mut dyn Write) -> Result<(), Error> {
    match verb {
        Verb::Synth(a) => {
            let s = &mut cfg.synth;
            s.classes = a.classes.unwrap_or(s.classes);
            s.per_class = a.per_class.unwrap_or(s.per_class);
            s.seed = a.seed.unwrap_or(s.seed);
            s.image_size = a.size.unwrap_or(s.image_size);
            s.noise = a.noise.unwrap_or(s.noise);
            let m = synth_generate(&cfg.synth, &a.out)?;
            let [tr, va, te] = m.split_totals();
            writeln!(out, "event=synth images={} train={tr} val={va} test={te} root={}", m.records.len(), a.out.display())
                .map_err(stdout_error)?;
        }
        Verb::Train(a) => {
            if let Some(p) = a.preset {
                let preset = if p == PresetArg::Full { Preset::Full } else { Preset::Desk };
                cfg.model = ModelConfig { attention_sites: cfg.model.attention_sites.clone(), ..ModelConfig::preset(preset) };
            }
            let t = &mut cfg.train;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.seed = a.seed.unwrap_or(t.seed);
            t.output_dir = Some(a.out.clone());
            t.validate()?;
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let manifest = load_manifest(&a.data)?;
            let cfg_path = a.out.join("config.toml");
            fs::write(&cfg_path, toml::to_string(&cfg).expect("config serializes")).map_err(|e| Error::io(&cfg_path, e))?;
            match a.precision {
                Precision::F32 => train_verb::<f32>(&cfg, &manifest, out)?,
                Precision::F64 => train_verb::<f64>(&cfg, &manifest, out)?,
            }
        }
        Verb::Eval(a) => {
            let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
            let stats = stats_from_metadata(&meta)?;
            let manifest = load_manifest(&a.data)?;
            let split = Split::from(a.split);
            let report = evaluate_model(&model, &stats, &manifest, split)?;
            let text = render_report(&report, a.format.into());
            write_or_print(out, a.out.as_deref(), &text)?;
            if a.out.is_some() || a.format != FormatArg::Text {
                writeln!(
                    out,
                    "event=eval split={} n={} top1={} top5={} mean_fnr={}",
                    split.name(),
                    report.n_samples,
                    report.top1,
                    report.top5,
                    report.mean_fnr
                )
                .map_err(stdout_error)?;
            }
        }
        Verb::Predict(a) => {
            let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
            let stats = stats_from_metadata(&meta)?;
            for p in predict_image(&model, &stats, &a.image, a.top)? {
                writeln!(out, "class={} score={}", p.class, p.score).map_err(stdout_error)?;
            }
        }
        Verb::LrDump(a) => {
            let mut sched = cfg.train.effective_schedule();
            if a.literal {
                sched.scaling = Scaling::Literal;
            }
            let csv = lr_csv(&sched, a.batch_size.unwrap_or(cfg.train.batch_size))?;
            write_or_print(out, a.out.as_deref(), &csv)?;
        }
        Verb::Report(a) => {
            let text = fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
            let report = parse_report_csv(&text)?;
            write_or_print(out, a.out.as_deref(), &render_report(&report, a.format.into()))?;
        }
    }
    Ok(())
}

fn train_verb<T: Scalar>(cfg: &AppConfig, manifest: &DatasetManifest, out: &mut dyn Write) -> Result<(), Error> {
    let mut write_err = None;
    let outcome = train_with_observer::<T>(&cfg.train, manifest, &cfg.model, &mut |r| {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
        let line = format!(
            "event=epoch epoch={} train_loss={} train_top1={} val_top1={} val_top5={} lr={:?}",
            r.epoch,
            r.train_loss,
            r.train_top1,
            opt(r.val_top1),
            opt(r.val_top5),
            r.lr
        );
        if let Err(e) = writeln!(out, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(stdout_error(e));
    }
    writeln!(
        out,
        "event=done best_epoch={} out={}",
        outcome.best_epoch,
        cfg.train.output_dir.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default()
    )
    .map_err(stdout_error)?;
    Ok(())
}
