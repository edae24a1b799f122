//! Run configuration: one flat key table shared by the config file and the
//! command-line flags. Resolution order is flag, then file, then default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};
use squidlet::compression::{Activation, CompressionConfig, PipelineConfig, Trainable};
use squidlet::kv::KvMap;
use squidlet::tokenizer::{Tokenizer, BASE_VOCAB};
use squidlet::training::{Stage, StageConfig};
use squidlet::transformer::DecoderConfig;

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const KEYS: &[Key] = &[
    key("seed", None, "RNG seed (required wherever randomness is used)"),
    key("corpus", None, "JSONL corpus path"),
    key("out", None, "output directory; nothing is written outside it"),
    key("checkpoint", None, "checkpoint to load"),
    key("report", None, "write the report as NDJSON to this path"),
    // data-gen
    key("n", Some("1000"), "number of synthetic samples"),
    key("min_entities", Some("1"), "fewest entities per synthetic context"),
    key("max_entities", Some("3"), "most entities per synthetic context"),
    // model shape (fresh models only)
    key("n_memory", Some("64"), "memory tokens per context"),
    key("max_context", Some("512"), "longest context accepted, in tokens"),
    key("d_proj", Some("128"), "projector hidden width"),
    key("activation", Some("gelu"), "projector activation: gelu | identity"),
    key("encoder_d_model", Some("64"), "small decoder width"),
    key("encoder_layers", Some("4"), "small decoder depth"),
    key("encoder_heads", Some("4"), "small decoder attention heads"),
    key("encoder_d_ff", Some("192"), "small decoder feed-forward width"),
    key("decoder_d_model", Some("128"), "main decoder width"),
    key("decoder_layers", Some("6"), "main decoder depth"),
    key("decoder_heads", Some("8"), "main decoder attention heads"),
    key("decoder_d_ff", Some("384"), "main decoder feed-forward width"),
    // training
    key("stage", Some("restoration"), "restoration | continual | instruction | all"),
    key("steps", Some("1000"), "optimizer steps per stage"),
    key("batch_size", Some("8"), "samples per step"),
    key("lr", Some("0.001"), "peak learning rate"),
    key("warmup", Some("auto"), "warmup steps (auto = min(steps/20, 100))"),
    key("min_lr_ratio", Some("0.1"), "cosine floor as a fraction of lr"),
    key("clip_norm", Some("1.0"), "global gradient-norm clip (0 disables)"),
    key("weight_decay", Some("0.1"), "AdamW decoupled weight decay"),
    key("train_encoder", Some("true"), "update the small decoder"),
    key("train_projector", Some("true"), "update the projector"),
    key("train_decoder", Some("true"), "update the main decoder"),
    key("checkpoint_every", Some("0"), "also checkpoint every k steps (0 = stage end only)"),
    // eval / bench / generate
    key("task", Some("both"), "restoration | answer | both"),
    key("limit", Some("0"), "use only the first k samples (0 = all)"),
    key("max_new", Some("32"), "tokens to generate"),
    key("repetitions", Some("10"), "timed runs per sample"),
    key("warmup_runs", Some("3"), "untimed runs per sample"),
    key("include_compression_cost", Some("true"), "time the encoder and projector in the compressed arm"),
    key("mode", Some("answer"), "answer | restore | continue"),
    key("context", None, "context text"),
    key("context_file", None, "read the context from this file"),
    key("prompt", None, "question text (omit to read prompts from stdin)"),
    key("temperature", Some("0"), "sampling temperature (0 = greedy)"),
];

const MODEL_KEYS: &[&str] = &[
    "n_memory",
    "max_context",
    "d_proj",
    "activation",
    "encoder_d_model",
    "encoder_layers",
    "encoder_heads",
    "encoder_d_ff",
    "decoder_d_model",
    "decoder_layers",
    "decoder_heads",
    "decoder_d_ff",
];

const TRAIN_KEYS: &[&str] = &[
    "stage",
    "steps",
    "batch_size",
    "lr",
    "warmup",
    "min_lr_ratio",
    "clip_norm",
    "weight_decay",
    "train_encoder",
    "train_projector",
    "train_decoder",
    "checkpoint_every",
];

/// Keys each subcommand reads.
pub fn keys_for(sub: &str) -> Vec<&'static str> {
    let mut k: Vec<&'static str> = match sub {
        "data-gen" => vec!["seed", "out", "n", "min_entities", "max_entities"],
        "train" => vec!["seed", "corpus", "out", "checkpoint"],
        "eval" => vec!["corpus", "checkpoint", "report", "task", "limit"],
        "bench" => vec![
            "corpus",
            "checkpoint",
            "report",
            "n_memory",
            "limit",
            "max_new",
            "repetitions",
            "warmup_runs",
            "include_compression_cost",
        ],
        "generate" => vec![
            "seed",
            "checkpoint",
            "mode",
            "context",
            "context_file",
            "prompt",
            "max_new",
            "temperature",
        ],
        "inspect-checkpoint" => vec!["checkpoint"],
        _ => vec![],
    };
    if sub == "train" {
        k.extend_from_slice(MODEL_KEYS);
        k.extend_from_slice(TRAIN_KEYS);
    }
    k
}

fn lookup(name: &str) -> &'static Key {
    KEYS.iter().find(|k| k.name == name).expect("key table")
}

/// Default for `name` under `sub`; bench keeps the checkpoint's memory count
/// unless told otherwise.
fn default_for(sub: &str, name: &str) -> Option<&'static str> {
    match (sub, name) {
        ("bench", "n_memory") => None,
        _ => lookup(name).default,
    }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Adds one `--flag <value>` per key, plus the shared `--config` and
/// `--dry-run` switches.
pub fn with_keys(mut cmd: Command, sub: &str) -> Command {
    for name in keys_for(sub) {
        let k = lookup(name);
        let help = match default_for(sub, name) {
            Some(d) => format!("{} [default: {d}]", k.help),
            None => k.help.to_string(),
        };
        cmd = cmd.arg(Arg::new(name).long(flag_name(name)).value_name("VALUE").help(help));
    }
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value config file; flags override it"),
    )
    .arg(
        Arg::new("dry_run")
            .long("dry-run")
            .action(ArgAction::SetTrue)
            .help("print the resolved configuration and exit"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::File => "file",
            Source::Default => "default",
        })
    }
}

/// Values for one subcommand after precedence resolution.
pub struct Resolved {
    pub sub: String,
    values: BTreeMap<&'static str, (String, Source)>,
    order: Vec<&'static str>,
}

impl Resolved {
    pub fn new(sub: &str, m: &ArgMatches) -> Result<Self, CliError> {
        let file = match m.get_one::<String>("config") {
            Some(p) => {
                let path = Path::new(p);
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                let kv = KvMap::parse(&text, path)?;
                let all: Vec<&str> = KEYS.iter().map(|k| k.name).collect();
                kv.reject_unknown(&all)?;
                kv
            }
            None => KvMap::default(),
        };
        let order = keys_for(sub);
        let mut values = BTreeMap::new();
        for &name in &order {
            let v = if let Some(v) = m.get_one::<String>(name) {
                Some((v.clone(), Source::Flag))
            } else if let Some(v) = file.raw(name) {
                Some((v.to_string(), Source::File))
            } else {
                default_for(sub, name).map(|d| (d.to_string(), Source::Default))
            };
            if let Some(v) = v {
                values.insert(name, v);
            }
        }
        Ok(Resolved {
            sub: sub.to_string(),
            values,
            order,
        })
    }

    pub fn header(&self) -> String {
        let mut out = format!("# squidlet {}\n", self.sub);
        for name in &self.order {
            match self.values.get(name) {
                Some((v, src)) => out.push_str(&format!("# {name} = {v}  [{src}]\n")),
                None => out.push_str(&format!("# {name} = (unset)\n")),
            }
        }
        out
    }

    pub fn source(&self, name: &str) -> Option<Source> {
        self.values.get(name).map(|(_, s)| *s)
    }

    pub fn raw(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<Option<T>, CliError> {
        let Some((v, src)) = self.values.get(name) else {
            return Ok(None);
        };
        v.parse::<T>().map(Some).map_err(|_| {
            let origin = match src {
                Source::Flag => format!("flag --{}", flag_name(name)),
                Source::File => "config file".into(),
                Source::Default => "default".into(),
            };
            CliError::Usage(format!(
                "config error: `{name}` expects {}, found `{v}` (from {origin})",
                type_label::<T>()
            ))
        })
    }

    pub fn require<T: FromStr>(&self, name: &str) -> Result<T, CliError> {
        self.get(name)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{} (or `{name}` in the config file)", flag_name(name))))
    }

    /// An input file that must already exist.
    pub fn input_path(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = PathBuf::from(self.require::<String>(name)?);
        if !p.is_file() {
            return Err(CliError::Usage(format!("--{}: {} is not a readable file", flag_name(name), p.display())));
        }
        Ok(p)
    }

    pub fn optional_input(&self, name: &str) -> Result<Option<PathBuf>, CliError> {
        match self.raw(name) {
            Some(_) => self.input_path(name).map(Some),
            None => Ok(None),
        }
    }

    /// An output file whose parent directory must exist.
    pub fn output_path(&self, name: &str) -> Result<Option<PathBuf>, CliError> {
        let Some(p) = self.raw(name).map(PathBuf::from) else {
            return Ok(None);
        };
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(CliError::Usage(format!("--{}: directory {} does not exist", flag_name(name), parent.display())));
        }
        Ok(Some(p))
    }

    /// Fresh-model configuration. Refuses shape keys set explicitly next to a
    /// checkpoint, since the checkpoint fixes the shapes.
    pub fn pipeline_config(&self, have_checkpoint: bool) -> Result<PipelineConfig, CliError> {
        if have_checkpoint {
            if let Some(k) = MODEL_KEYS.iter().find(|k| self.source(k) != Some(Source::Default)) {
                return Err(CliError::Usage(format!(
                    "`{k}` cannot be changed when continuing from --checkpoint"
                )));
            }
        }
        let tok = Tokenizer::default();
        let activation = match self.require::<String>("activation")?.as_str() {
            "gelu" => Activation::Gelu,
            "identity" => Activation::Identity,
            other => {
                return Err(CliError::Usage(format!(
                    "config error: `activation` expects gelu or identity, found `{other}`"
                )))
            }
        };
        let decoder = |prefix: &str, vocab: usize| -> Result<DecoderConfig, CliError> {
            Ok(DecoderConfig {
                d_model: self.require(&format!("{prefix}_d_model"))?,
                n_layers: self.require(&format!("{prefix}_layers"))?,
                n_heads: self.require(&format!("{prefix}_heads"))?,
                d_ff: self.require(&format!("{prefix}_d_ff"))?,
                vocab_size: vocab,
                ..DecoderConfig::main(vocab)
            })
        };
        let cfg = PipelineConfig {
            max_memory: tok.max_memory(),
            compression: CompressionConfig {
                n_memory: self.require("n_memory")?,
                max_context: self.require("max_context")?,
            },
            encoder: decoder("encoder", tok.vocab_size())?,
            decoder: decoder("decoder", BASE_VOCAB)?,
            d_proj: self.require("d_proj")?,
            activation,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn stages(&self) -> Result<Vec<Stage>, CliError> {
        match self.require::<String>("stage")?.as_str() {
            "all" => Ok(Stage::ALL.to_vec()),
            s => s
                .parse::<Stage>()
                .map(|s| vec![s])
                .map_err(|e| CliError::Usage(format!("--stage: {e}"))),
        }
    }

    pub fn stage_config(&self, stage: Stage, seed: u64) -> Result<StageConfig, CliError> {
        let steps = self.require("steps")?;
        let mut c = StageConfig::new(stage, steps, seed);
        c.batch_size = self.require("batch_size")?;
        c.max_context = self.require("max_context")?;
        c.lr = self.require("lr")?;
        if self.raw("warmup") != Some("auto") {
            c.warmup = self.require("warmup")?;
        }
        c.min_lr_ratio = self.require("min_lr_ratio")?;
        c.clip_norm = self.require("clip_norm")?;
        c.optimizer.weight_decay = self.require("weight_decay")?;
        c.trainable = Trainable {
            encoder: self.require("train_encoder")?,
            projector: self.require("train_projector")?,
            decoder: self.require("train_decoder")?,
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

fn type_label<T>() -> &'static str {
    let name = std::any::type_name::<T>();
    match name {
        "usize" | "u64" | "u32" => "a non-negative integer",
        "f32" | "f64" => "a number",
        "bool" => "true or false",
        _ => "a string",
    }
}
