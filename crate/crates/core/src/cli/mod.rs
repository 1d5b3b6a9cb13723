// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. [`run`] is the whole program minus process exit.
//!
//! Every command resolves its flags, the optional `--config` file and the
//! defaults into one settings value, writes `manifest.json` into
//! `<out-root>/<run-id>/`, then produces its outputs next to it. The run id
//! is a digest of the manifest, so identical settings and inputs land in the
//! same directory with the same bytes. `replay` re-executes a manifest.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::activation_store::TapKind;
use crate::error::{Error, Result};
use crate::micro_transformer::{LoraConfig, ModelConfig, TrainConfig};
use crate::probe_engine::{FeatureMode, ProbeConfig, ProbeKind, SelectionMetric};
use crate::seed::{short_digest, DEFAULT_SEED};

mod commands;

pub use commands::Settings;

pub const SEED_ENV: &str = "HEADPROBE_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";

fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "headprobe", version, about = "Probe construct signals in transformer activations")]
pub struct Cli {
    /// Base seed for every derived seed [default: $HEADPROBE_SEED or 42].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with top-level `seed`/`workers` and one table per command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Threads for sweeps and forward passes. Does not change any output.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Runs are written to `<out-root>/<run-id>/`.
    #[arg(long, global = true, default_value = "reports")]
    pub out_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward the built-in model over labeled reviews and store taps.
    Extract(ExtractArgs),
    /// Activation-difference map between high and low samples.
    Diff(DiffArgs),
    /// Probe sweeps over (layer, head) cells.
    Probe(ProbeArgs),
    /// LoRA fine-tuning of the built-in model on one construct.
    Finetune(FinetuneArgs),
    /// Base vs fine-tuned comparison and generation-based evaluation.
    Report(ReportArgs),
    /// Planted-signal recovery checks.
    Selftest(SelftestArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractArgs {
    /// JSON-lines label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Model checkpoint; the built-in model is used when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Adapter checkpoint applied on top of the model.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    /// Comma-separated taps: head, post_attn, post_mlp [default: all].
    #[arg(long, value_delimiter = ',', value_parser = parse_serde::<TapKind>)]
    pub taps: Vec<TapKind>,
    /// Built-in model hyperparameters (config file only).
    #[arg(skip)]
    pub model: Option<ModelConfig>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffArgs {
    /// Head activation file.
    #[arg(long)]
    pub activations: Option<PathBuf>,
    /// Optional residual activation file for the per-layer norm curve.
    #[arg(long)]
    pub residual: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub construct: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeArgs {
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Repeatable.
    #[arg(long = "construct")]
    pub constructs: Vec<String>,
    /// Sweep every construct in the catalogue.
    #[arg(long)]
    pub all_constructs: bool,
    /// per_head, per_layer or concatenated_heads [default: from the tap].
    #[arg(long, value_parser = parse_serde::<FeatureMode>)]
    pub mode: Option<FeatureMode>,
    /// linear or mlp.
    #[arg(long, value_parser = parse_serde::<ProbeKind>)]
    pub kind: Option<ProbeKind>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Metric drawn in the heatmaps and used for best cells.
    #[arg(long, value_parser = parse_serde::<SelectionMetric>)]
    pub metric: Option<SelectionMetric>,
    /// Full probe settings (config file only); flags above override it.
    #[arg(skip)]
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub construct: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(skip)]
    pub model: Option<ModelConfig>,
    #[arg(skip)]
    pub lora: Option<LoraConfig>,
    #[arg(skip)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportArgs {
    /// Two probe run directories: base, then fine-tuned.
    #[arg(long, num_args = 2, value_names = ["BASE", "FT"])]
    pub compare: Vec<PathBuf>,
    /// Labels for generation-based evaluation.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub construct: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fine-tuned adapters, evaluated next to the base model.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(skip)]
    pub model: Option<ModelConfig>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftestArgs {
    /// Fixture seeds per check [default: 100].
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    workers: Option<usize>,
    /// Built-in model used by every command that does not set its own.
    model: Option<ModelConfig>,
    extract: Option<Value>,
    diff: Option<Value>,
    probe: Option<Value>,
    finetune: Option<Value>,
    report: Option<Value>,
    selftest: Option<Value>,
}

fn unset(v: &Value) -> bool {
    match v {
        Value::Null | Value::Bool(false) => true,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Flags win; a config key only fills a flag that was not given.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, table: Option<&Value>) -> Result<T> {
    let Some(table) = table else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let Value::Object(cfg) = table else {
        return Err(Error::Usage("config sections must be tables".into()));
    };
    let mut merged = serde_json::to_value(flags)?;
    let obj = merged.as_object_mut().expect("argument structs serialize to objects");
    for (k, v) in cfg {
        match obj.get(k) {
            Some(cur) if !unset(cur) => {}
            _ => {
                obj.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| Error::Usage(format!("config: {e}")))
}

/// A file the run read, pinned by content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn pin(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(InputFile {
            path: path.to_path_buf(),
            sha256: hex(&Sha256::digest(&bytes)),
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to reproduce a run. Thread count and output root are
/// left out on purpose: they never change the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub toolkit_version: String,
    pub seed: u64,
    pub inputs: Vec<InputFile>,
    pub settings: Settings,
}

impl RunManifest {
    pub fn new(seed: u64, settings: Settings) -> Result<Self> {
        let inputs = settings
            .input_paths()
            .iter()
            .map(|p| InputFile::pin(p))
            .collect::<Result<Vec<_>>>()?;
        let mut m = RunManifest {
            run_id: String::new(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs,
            settings,
        };
        m.run_id = short_digest(&serde_json::to_vec(&m)?);
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Outcome of a successful command.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Non-zero when a selftest check failed.
    pub exit_code: i32,
    pub messages: Vec<String>,
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

/// Executes an already resolved run: manifest first, then outputs.
pub fn execute(manifest: &RunManifest, out_root: &Path, workers: Option<usize>) -> Result<RunOutput> {
    let dir = out_root.join(&manifest.run_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    manifest.write(&dir)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Usage("--workers must be >= 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {workers:?} workers: {e}")))?;
    let produced = pool.install(|| manifest.settings.run(manifest.seed, &dir))?;
    Ok(RunOutput {
        run_dir: dir,
        files: produced.files,
        exit_code: produced.exit_code,
        messages: produced.messages,
    })
}

/// Parses nothing; runs a parsed command line.
pub fn run(cli: Cli) -> Result<RunOutput> {
    let config = load_config(cli.config.as_deref())?;
    let workers = cli.workers.or(config.workers);
    let seed = resolve_seed(cli.seed, config.seed)?;
    let model = config.model.clone();
    let settings = match &cli.command {
        Command::Extract(a) => {
            let mut a: ExtractArgs = merge(a, config.extract.as_ref())?;
            if a.checkpoint.is_none() {
                a.model = a.model.or(model);
            }
            Settings::extract(a, seed)?
        }
        Command::Diff(a) => Settings::diff(merge(a, config.diff.as_ref())?)?,
        Command::Probe(a) => Settings::probe(merge(a, config.probe.as_ref())?, seed)?,
        Command::Finetune(a) => {
            let mut a: FinetuneArgs = merge(a, config.finetune.as_ref())?;
            if a.checkpoint.is_none() {
                a.model = a.model.or(model);
            }
            Settings::finetune(a, seed)?
        }
        Command::Report(a) => {
            let mut a: ReportArgs = merge(a, config.report.as_ref())?;
            if a.checkpoint.is_none() {
                a.model = a.model.or(model);
            }
            Settings::report(a, seed)?
        }
        Command::Selftest(a) => Settings::selftest(merge(a, config.selftest.as_ref())?),
        Command::Replay(a) => {
            let recorded = RunManifest::read(&a.manifest)?;
            let fresh = RunManifest::new(recorded.seed, recorded.settings.clone())?;
            if fresh.run_id != recorded.run_id {
                return Err(Error::Config(format!(
                    "manifest {} no longer matches its inputs or toolkit version (run id {} vs {})",
                    a.manifest.display(),
                    recorded.run_id,
                    fresh.run_id
                )));
            }
            return execute(&fresh, &cli.out_root, workers);
        }
    };
    let manifest = RunManifest::new(seed, settings)?;
    execute(&manifest, &cli.out_root, workers)
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run(cli) {
        Ok(out) => {
            let _ = writeln!(stdout, "{}", out.run_dir.display());
            for f in &out.files {
                let _ = writeln!(stdout, "  {}", f.display());
            }
            for m in &out.messages {
                let _ = writeln!(stdout, "{m}");
            }
            out.exit_code
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let _ = writeln!(stderr, "  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
