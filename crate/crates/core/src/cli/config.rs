//! Run configuration: command-line flags layered over an optional
//! `key = value` file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command as ClapCommand};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PosEncoding};
use crate::pretrain::{DocSplit, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Train,
    Align,
    Generate,
    Eval,
    Tokenize,
}

impl CommandKind {
    pub const ALL: [CommandKind; 5] = [
        CommandKind::Train,
        CommandKind::Align,
        CommandKind::Generate,
        CommandKind::Eval,
        CommandKind::Tokenize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Train => "train",
            CommandKind::Align => "align",
            CommandKind::Generate => "generate",
            CommandKind::Eval => "eval",
            CommandKind::Tokenize => "tokenize",
        }
    }

    fn about(self) -> &'static str {
        match self {
            CommandKind::Train => "Pretrain on a text corpus and write a checkpoint",
            CommandKind::Align => "Align a checkpoint with dpo, rsft or rlvr",
            CommandKind::Generate => "Sample a continuation of a prompt",
            CommandKind::Eval => "Run the conformance suite, perplexity or hallucination reports",
            CommandKind::Tokenize => "Encode text to token ids or decode ids to text",
        }
    }
}

#[derive(Clone, Copy)]
struct Key {
    name: &'static str,
    help: &'static str,
    switch: bool,
}

const fn key(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        help,
        switch: false,
    }
}

const fn switch(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        help,
        switch: true,
    }
}

const COMMON: &[Key] = &[key("seed", "RNG seed for initialization, batching and sampling")];

const MODEL: &[Key] = &[
    key("d_model", "embedding dimension"),
    key("n_layer", "number of transformer blocks"),
    key("n_head", "attention heads per block"),
    key("context", "context window length"),
    key("pos_encoding", "rope | sinusoidal | learned"),
    key(
        "tie_output",
        "share the embedding matrix with the output head (true/false)",
    ),
    key("attn_scale", "scale attention scores by 1/sqrt(head dim) (true/false)"),
    key("ffn_mult", "feed-forward width multiplier"),
    key("layer_norm", "apply LayerNorm in every block (true/false)"),
];

const OPTIM: &[Key] = &[
    key("steps", "optimizer steps"),
    key("lr", "learning rate"),
    key("beta1", "Adam first-moment decay"),
    key("beta2", "Adam second-moment decay"),
    key("eps", "Adam epsilon"),
    key("weight_decay", "decoupled weight decay on matrices"),
    key("grad_clip", "global gradient-norm ceiling (0 disables)"),
    key("warmup_steps", "linear learning-rate warmup"),
    key("loss_log", "write per-step losses to this file"),
];

const SAMPLER: &[Key] = &[
    key("temperature", "sampling temperature (> 0)"),
    key("top_k", "keep only the k most likely tokens"),
    key("max_new_tokens", "generation budget"),
];

const TRAIN: &[Key] = &[
    key("corpus", "text file or directory of text files"),
    key("split", "document boundaries: file | line | paragraph"),
    key("out", "checkpoint to write"),
    key("checkpoint", "resume from this checkpoint"),
    key("batch_size", "sequences per step"),
    key("seq_len", "tokens per training sequence"),
    key("log_every", "log the loss every n steps"),
];

const ALIGN: &[Key] = &[
    key("mode", "dpo | rsft | rlvr"),
    key("checkpoint", "policy to align"),
    key("out", "checkpoint to write"),
    key("preferences", "tab-separated prompt/preferred/rejected file"),
    key(
        "prompts",
        "one prompt per line (rsft/rlvr; default: single-digit additions)",
    ),
    key("reward", "rsft reward: arithmetic | learned"),
    key("beta", "DPO inverse temperature"),
    key("samples", "completions per prompt"),
    key("prompts_per_step", "prompts sampled for each rlvr step"),
];

const GENERATE: &[Key] = &[
    key("checkpoint", "model checkpoint"),
    key("prompt", "prompt text"),
    switch("stream", "print each token as it is sampled"),
    switch("ignore_eos", "keep sampling past the end-of-sequence token"),
    key("rag_store", "directory of text files used for retrieval"),
    key("rag_top", "chunks retrieved per prompt"),
];

const EVAL: &[Key] = &[
    key("suite", "conformance | perplexity | hallucination | rag"),
    key("checkpoint", "model checkpoint"),
    key("corpus", "text for perplexity"),
    key("split", "document boundaries: file | line | paragraph"),
    key("seq_len", "window length for perplexity"),
    key("prompts", "one prompt per line (default: single-digit additions)"),
    key("samples", "samples per prompt"),
    key("rag_store", "directory of text files used for retrieval"),
    key("rag_top", "chunks retrieved per prompt"),
    key("report", "write key=value results to this file"),
];

const TOKENIZE: &[Key] = &[
    key("text", "text to encode"),
    key("input", "file to encode"),
    key("decode", "space-separated token ids to decode"),
];

fn keys(cmd: CommandKind) -> Vec<Key> {
    let groups: &[&[Key]] = match cmd {
        CommandKind::Train => &[COMMON, MODEL, OPTIM, TRAIN],
        CommandKind::Align => &[COMMON, MODEL, OPTIM, SAMPLER, ALIGN],
        CommandKind::Generate => &[COMMON, MODEL, SAMPLER, GENERATE],
        CommandKind::Eval => &[COMMON, MODEL, SAMPLER, EVAL],
        CommandKind::Tokenize => &[TOKENIZE],
    };
    let mut out: Vec<Key> = Vec::new();
    for k in groups.iter().flat_map(|g| g.iter()) {
        if !out.iter().any(|o| o.name == k.name) {
            out.push(*k);
        }
    }
    out
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// The clap command tree; every key doubles as a `--flag`.
pub fn command() -> ClapCommand {
    let mut root = ClapCommand::new("arllm")
        .about("Desk-scale causal transformer: pretrain, align, generate, evaluate")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in CommandKind::ALL {
        let mut sub = ClapCommand::new(cmd.name()).about(cmd.about()).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value configuration file; flags take precedence"),
        );
        for k in keys(cmd) {
            let mut a = Arg::new(k.name).long(flag_name(k.name)).help(k.help);
            a = if k.switch {
                a.action(ArgAction::SetTrue)
            } else {
                a.value_name("VALUE").allow_hyphen_values(true)
            };
            sub = sub.arg(a);
        }
        root = root.subcommand(sub);
    }
    root
}

/// Parse a `key = value` file. `#` starts a comment line; values may be
/// wrapped in double quotes.
pub fn parse_config_file(text: &str, cmd: CommandKind) -> Result<BTreeMap<String, String>> {
    let known = keys(cmd);
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let k = k.trim().replace('-', "_");
        if !known.iter().any(|x| x.name == k) {
            return Err(Error::Usage(format!(
                "config line {}: unknown key `{k}` for `{}`",
                i + 1,
                cmd.name()
            )));
        }
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        out.insert(k, v.to_string());
    }
    Ok(out)
}

/// Merged settings with typed accessors that name the offending key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_map(values: BTreeMap<String, String>) -> Self {
        Self { values }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Usage(format!("invalid value {v:?} for `{key}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Usage(format!("missing required `{}`", flag_name(key))))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        self.get_or(key, false)
    }

    /// A path that must already exist.
    pub fn existing_path(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.get::<PathBuf>(key)? {
            Some(p) if !p.exists() => Err(Error::Usage(format!("`{key}`: {} does not exist", p.display()))),
            other => Ok(other),
        }
    }

    pub fn require_existing(&self, key: &str) -> Result<PathBuf> {
        self.existing_path(key)?
            .ok_or_else(|| Error::Usage(format!("missing required `{}`", flag_name(key))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub corpus: PathBuf,
    pub split: DocSplit,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub log_every: u64,
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    Dpo,
    Rsft,
    Rlvr,
}

impl FromStr for AlignMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dpo" => Ok(AlignMode::Dpo),
            "rsft" => Ok(AlignMode::Rsft),
            "rlvr" => Ok(AlignMode::Rlvr),
            other => Err(format!("expected dpo, rsft or rlvr, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Arithmetic,
    Learned,
}

impl FromStr for RewardKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "arithmetic" => Ok(RewardKind::Arithmetic),
            "learned" => Ok(RewardKind::Learned),
            other => Err(format!("expected arithmetic or learned, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignArgs {
    pub mode: AlignMode,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub preferences: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub reward: RewardKind,
    pub beta: f64,
    pub samples: usize,
    pub prompts_per_step: usize,
    pub steps: u64,
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub stream: bool,
    pub ignore_eos: bool,
    pub rag_store: Option<PathBuf>,
    pub rag_top: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Conformance,
    Perplexity,
    Hallucination,
    Rag,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "conformance" => Ok(Suite::Conformance),
            "perplexity" => Ok(Suite::Perplexity),
            "hallucination" => Ok(Suite::Hallucination),
            "rag" => Ok(Suite::Rag),
            other => Err(format!(
                "expected conformance, perplexity, hallucination or rag, got {other:?}"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    pub suite: Suite,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub split: DocSplit,
    pub seq_len: Option<usize>,
    pub prompts: Option<PathBuf>,
    pub samples: usize,
    pub rag_store: Option<PathBuf>,
    pub rag_top: usize,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenizeArgs {
    Encode(Vec<u8>),
    Decode(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Train(TrainArgs),
    Align(AlignArgs),
    Generate(GenerateArgs),
    Eval(EvalArgs),
    Tokenize(TokenizeArgs),
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    /// Architecture for fresh models; when a checkpoint is loaded, only the
    /// keys given explicitly are checked against it.
    pub model: ModelConfig,
    /// Architecture keys set explicitly by the user.
    pub model_overrides: Vec<String>,
    pub optim: OptimConfig,
    pub sampler: SamplerSettings,
    pub seed: u64,
    pub settings: Settings,
}

pub enum Parsed {
    Run(Box<RunConfig>),
    /// Help or version text to print before exiting successfully.
    Info(String),
}

fn parse_bool(s: &Settings, key: &str, default: bool) -> Result<bool> {
    s.get_or(key, default)
}

fn doc_split(s: &Settings) -> Result<DocSplit> {
    let v = s.raw("split").unwrap_or("file");
    v.parse()
        .map_err(|e| Error::Usage(format!("invalid value {v:?} for `split`: {e}")))
}

fn model_config(s: &Settings, vocab_size: usize) -> Result<ModelConfig> {
    let mut c = ModelConfig::new(
        s.get_or("d_model", 64)?,
        vocab_size,
        s.get_or("n_layer", 2)?,
        s.get_or("n_head", 4)?,
        s.get_or("context", 64)?,
    );
    c.pos_encoding = match s.raw("pos_encoding") {
        None => PosEncoding::Rope,
        Some(v) => v
            .parse()
            .map_err(|e| Error::Usage(format!("invalid value {v:?} for `pos_encoding`: {e}")))?,
    };
    c.tie_output = parse_bool(s, "tie_output", false)?;
    c.attn_scale = parse_bool(s, "attn_scale", true)?;
    c.ffn_mult = s.get_or("ffn_mult", 4)?;
    c.layer_norm = parse_bool(s, "layer_norm", true)?;
    Ok(c)
}

fn optim_config(s: &Settings, cmd: CommandKind) -> Result<OptimConfig> {
    let base = OptimConfig::default();
    let default_decay = if cmd == CommandKind::Align {
        0.0
    } else {
        base.weight_decay
    };
    let clip: f64 = s.get_or("grad_clip", base.grad_clip.unwrap_or(0.0))?;
    let o = OptimConfig {
        lr: s.get_or("lr", if cmd == CommandKind::Align { 1e-4 } else { base.lr })?,
        beta1: s.get_or("beta1", base.beta1)?,
        beta2: s.get_or("beta2", base.beta2)?,
        eps: s.get_or("eps", base.eps)?,
        weight_decay: s.get_or("weight_decay", default_decay)?,
        grad_clip: (clip > 0.0).then_some(clip),
        warmup_steps: s.get_or("warmup_steps", base.warmup_steps)?,
    };
    o.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(o)
}

fn sampler_settings(s: &Settings) -> Result<SamplerSettings> {
    let temperature: f64 = s.get_or("temperature", 1.0)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Usage(format!(
            "`temperature` must be positive, got {temperature}"
        )));
    }
    let top_k: Option<usize> = s.get("top_k")?;
    if top_k == Some(0) {
        return Err(Error::Usage("`top_k` must be at least 1".into()));
    }
    Ok(SamplerSettings {
        temperature,
        top_k,
        max_new_tokens: s.get_or("max_new_tokens", 64)?,
    })
}

fn build(cmd: CommandKind, s: Settings) -> Result<RunConfig> {
    let vocab_size = crate::tokenizer::Vocabulary::byte_level().size();
    let model = model_config(&s, vocab_size)?;
    let model_overrides = MODEL
        .iter()
        .filter(|k| s.raw(k.name).is_some())
        .map(|k| k.name.to_string())
        .collect();
    let optim = optim_config(&s, cmd)?;
    let sampler = sampler_settings(&s)?;
    let seed = s.get_or("seed", 0u64)?;
    let command = match cmd {
        CommandKind::Train => {
            model.validate().map_err(|e| Error::Usage(e.to_string()))?;
            let seq_len = s.get_or("seq_len", model.context)?;
            Command::Train(TrainArgs {
                corpus: s.require_existing("corpus")?,
                split: doc_split(&s)?,
                out: s.require("out")?,
                resume: s.existing_path("checkpoint")?,
                steps: s.get_or("steps", 1000)?,
                batch_size: s.get_or("batch_size", 8)?,
                seq_len,
                log_every: s.get_or("log_every", 50)?,
                loss_log: s.get("loss_log")?,
            })
        }
        CommandKind::Align => {
            let mode: AlignMode = s.require("mode")?;
            let preferences = s.existing_path("preferences")?;
            let reward = s.get_or("reward", RewardKind::Arithmetic)?;
            if (mode == AlignMode::Dpo || reward == RewardKind::Learned && mode == AlignMode::Rsft)
                && preferences.is_none()
            {
                return Err(Error::Usage("missing required `preferences`".into()));
            }
            let samples = s.get_or("samples", if mode == AlignMode::Rsft { 4 } else { 8 })?;
            if samples == 0 || (mode == AlignMode::Rlvr && samples < 2) {
                return Err(Error::Usage(format!("`samples` = {samples} is too small for {mode:?}")));
            }
            let beta: f64 = s.get_or("beta", 0.1)?;
            if !(beta > 0.0) {
                return Err(Error::Usage(format!("`beta` must be positive, got {beta}")));
            }
            Command::Align(AlignArgs {
                mode,
                checkpoint: s.require_existing("checkpoint")?,
                out: s.require("out")?,
                preferences,
                prompts: s.existing_path("prompts")?,
                reward,
                beta,
                samples,
                prompts_per_step: s.get_or("prompts_per_step", 16)?,
                steps: s.get_or("steps", 100)?,
                loss_log: s.get("loss_log")?,
            })
        }
        CommandKind::Generate => Command::Generate(GenerateArgs {
            checkpoint: s.require_existing("checkpoint")?,
            prompt: s.require("prompt")?,
            stream: s.flag("stream")?,
            ignore_eos: s.flag("ignore_eos")?,
            rag_store: s.existing_path("rag_store")?,
            rag_top: s.get_or("rag_top", 2)?,
        }),
        CommandKind::Eval => {
            let suite = s.get_or("suite", Suite::Conformance)?;
            let checkpoint = s.existing_path("checkpoint")?;
            if suite != Suite::Conformance && checkpoint.is_none() {
                return Err(Error::Usage("missing required `checkpoint`".into()));
            }
            let corpus = s.existing_path("corpus")?;
            if suite == Suite::Perplexity && corpus.is_none() {
                return Err(Error::Usage("missing required `corpus`".into()));
            }
            let rag_store = s.existing_path("rag_store")?;
            if suite == Suite::Rag && rag_store.is_none() {
                return Err(Error::Usage("missing required `rag-store`".into()));
            }
            let samples = s.get_or("samples", 8)?;
            if samples == 0 {
                return Err(Error::Usage("`samples` must be at least 1".into()));
            }
            Command::Eval(EvalArgs {
                suite,
                checkpoint,
                corpus,
                split: doc_split(&s)?,
                seq_len: s.get("seq_len")?,
                prompts: s.existing_path("prompts")?,
                samples,
                rag_store,
                rag_top: s.get_or("rag_top", 2)?,
                report: s.get("report")?,
            })
        }
        CommandKind::Tokenize => {
            let given = ["text", "input", "decode"]
                .iter()
                .filter(|k| s.raw(k).is_some())
                .count();
            if given != 1 {
                return Err(Error::Usage(
                    "give exactly one of `--text`, `--input` or `--decode`".into(),
                ));
            }
            if let Some(ids) = s.raw("decode") {
                let ids = ids
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|e| Error::Usage(format!("invalid value {t:?} for `decode`: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Command::Tokenize(TokenizeArgs::Decode(ids))
            } else if let Some(path) = s.existing_path("input")? {
                Command::Tokenize(TokenizeArgs::Encode(fs::read(&path)?))
            } else {
                Command::Tokenize(TokenizeArgs::Encode(s.require::<String>("text")?.into_bytes()))
            }
        }
    };
    Ok(RunConfig {
        command,
        model,
        model_overrides,
        optim,
        sampler,
        seed,
        settings: s,
    })
}

fn merge(cmd: CommandKind, m: &ArgMatches) -> Result<Settings> {
    let mut values = match m.get_one::<String>("config") {
        Some(path) => {
            let text = fs::read_to_string(Path::new(path))
                .map_err(|e| Error::Usage(format!("`config`: cannot read {path}: {e}")))?;
            parse_config_file(&text, cmd)?
        }
        None => BTreeMap::new(),
    };
    for k in keys(cmd) {
        if m.value_source(k.name) != Some(ValueSource::CommandLine) {
            continue;
        }
        let v = if k.switch {
            m.get_flag(k.name).to_string()
        } else {
            m.get_one::<String>(k.name).cloned().unwrap_or_default()
        };
        values.insert(k.name.to_string(), v);
    }
    Ok(Settings::from_map(values))
}

/// Parse `argv` (program name first).
pub fn parse_config<I, S>(argv: I) -> Result<Parsed>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => Ok(Parsed::Info(e.render().to_string())),
                _ => Err(Error::Usage(e.render().to_string().trim_end().to_string())),
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cmd = CommandKind::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .expect("registered subcommand");
    let settings = merge(cmd, sub)?;
    Ok(Parsed::Run(Box::new(build(cmd, settings)?)))
}
