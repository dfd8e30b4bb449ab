//! Experiment configuration: built-in defaults, overlaid by a TOML file, then
//! by `MLMKIT_<SECTION>_<KEY>` environment variables, then by command-line
//! flags. Every key remembers where its value came from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use mlmkit::bbpe::MIN_VOCAB;
use mlmkit::heads::{SentimentConfig, TaggerConfig};
use mlmkit::neural::{AdamConfig, Schedule, TransformerConfig};
use mlmkit::pretrain::PretrainConfig;

pub const ENV_PREFIX: &str = "MLMKIT_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    pub threads: usize,
}

/// Input files. An empty string means "not given".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Plain text, one sentence per line, blank lines between documents.
    pub corpus: String,
    /// CoNLL-U training data for the tagger probe.
    pub train: String,
    /// CoNLL-U data the tagger probe predicts; defaults to `train`.
    pub test: String,
    /// `label<TAB>text` sentiment data.
    pub sentiment: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSection {
    pub vocab_cap: usize,
    /// Directory holding `vocab.txt` and `merges.txt`; empty means the
    /// output directory.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    /// Pretrained checkpoint whose layers feed the tagger; empty for none.
    pub encoder: String,
    /// Tagger updates.
    pub steps: usize,
}

/// Fine-tuning protocol settings; the fold and shuffling seed is `run.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentSection {
    pub lr_grid: Vec<f64>,
    pub folds: usize,
    pub dev_fraction: f64,
    pub epochs: usize,
    pub frozen_lr: f64,
    pub warmup_epochs: f64,
    pub decay_epochs: f64,
    pub batch_size: usize,
}

impl From<SentimentConfig> for SentimentSection {
    fn from(c: SentimentConfig) -> Self {
        SentimentSection {
            lr_grid: c.lr_grid,
            folds: c.folds,
            dev_fraction: c.dev_fraction,
            epochs: c.epochs,
            frozen_lr: c.frozen_lr,
            warmup_epochs: c.warmup_epochs,
            decay_epochs: c.decay_epochs,
            batch_size: c.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub adam: AdamConfig,
    pub probe: ProbeSection,
    pub tagger: TaggerConfig,
    pub sentiment: SentimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run: RunSection { seed: 42, threads: 1 },
            data: DataSection::default(),
            tokenizer: TokenizerSection {
                vocab_cap: 52_000,
                dir: String::new(),
            },
            model: ModelSection {
                layers: 12,
                hidden: 768,
                heads: 12,
                ffn: 3072,
                max_positions: 512,
                eps: 1e-5,
            },
            pretrain: PretrainSection {
                steps: 91_075,
                batch_size: 32,
                mask_prob: 0.15,
                warmup_steps: 10_000,
                peak_lr: 7e-4,
                end_lr: 0.0,
                power: 1.0,
            },
            adam: AdamConfig::default(),
            probe: ProbeSection {
                encoder: String::new(),
                steps: 500,
            },
            tagger: TaggerConfig::default(),
            sentiment: SentimentConfig::default().into(),
        }
    }
}

/// Defaults taken from the published training and evaluation setup; all
/// other defaults are local choices.
const PUBLISHED_DEFAULTS: &[&str] = &[
    "tokenizer.vocab_cap",
    "model.layers",
    "model.hidden",
    "model.heads",
    "model.ffn",
    "model.max_positions",
    "pretrain.steps",
    "pretrain.warmup_steps",
    "pretrain.peak_lr",
    "adam.beta1",
    "adam.beta2",
    "tagger.layers",
    "sentiment.lr_grid",
    "sentiment.folds",
    "sentiment.dev_fraction",
    "sentiment.epochs",
    "sentiment.frozen_lr",
    "sentiment.warmup_epochs",
    "sentiment.decay_epochs",
    "sentiment.batch_size",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    PublishedDefault,
    LocalDefault,
    File,
    Env(String),
    Flag(String),
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::PublishedDefault => write!(f, "default (published setup)"),
            Source::LocalDefault => write!(f, "default (local choice)"),
            Source::File => write!(f, "config file"),
            Source::Env(v) => write!(f, "environment {v}"),
            Source::Flag(v) => write!(f, "flag {v}"),
        }
    }
}

/// Command-line values that override everything else.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub provenance: BTreeMap<String, Source>,
    /// Directory the config file was read from; relative data paths resolve
    /// against it.
    pub base_dir: PathBuf,
}

fn default_table() -> Table {
    Table::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerces `value` to the shape of `template`, allowing integers where
/// floats are expected.
fn conform(template: &Value, value: Value) -> Result<Value, String> {
    match (template, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(t), Value::Array(items)) => {
            let Some(elem) = t.first() else {
                return Ok(Value::Array(items));
            };
            items
                .into_iter()
                .map(|v| conform(elem, v))
                .collect::<Result<_, _>>()
                .map(Value::Array)
        }
        (Value::Integer(_), Value::Integer(i)) if i < 0 => Err(format!("expected a non-negative integer, got {i}")),
        (t, v) if std::mem::discriminant(t) == std::mem::discriminant(&v) => Ok(v),
        (t, v) => Err(format!("expected {}, got {}", type_name(t), type_name(&v))),
    }
}

/// Parses an environment value as a TOML literal, falling back to a bare
/// string. Array keys also accept a comma-separated list or a single item.
fn parse_env_value(template: &Value, raw: &str) -> Value {
    let literal = |raw: &str| {
        format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()))
    };
    if !matches!(template, Value::Array(_)) {
        return literal(raw);
    }
    match literal(raw) {
        v @ Value::Array(_) => v,
        _ => Value::Array(raw.split(',').map(|p| literal(p.trim())).collect()),
    }
}

pub struct Layering {
    table: Table,
    provenance: BTreeMap<String, Source>,
    errors: Vec<String>,
}

impl Layering {
    pub fn new() -> Self {
        let table = default_table();
        let mut provenance = BTreeMap::new();
        for (section, keys) in &table {
            for key in keys.as_table().expect("sections are tables").keys() {
                let name = format!("{section}.{key}");
                let source = if PUBLISHED_DEFAULTS.contains(&name.as_str()) {
                    Source::PublishedDefault
                } else {
                    Source::LocalDefault
                };
                provenance.insert(name, source);
            }
        }
        Layering {
            table,
            provenance,
            errors: Vec::new(),
        }
    }

    fn set(&mut self, section: &str, key: &str, value: Value, source: Source) {
        let name = format!("{section}.{key}");
        let Some(slot) = self
            .table
            .get_mut(section)
            .and_then(Value::as_table_mut)
            .and_then(|t| t.get_mut(key))
        else {
            self.errors.push(format!("{name}: unknown key ({source})"));
            return;
        };
        match conform(slot, value) {
            Ok(v) => {
                *slot = v;
                self.provenance.insert(name, source);
            }
            Err(e) => self.errors.push(format!("{name}: {e} ({source})")),
        }
    }

    pub fn apply_file(&mut self, text: &str, path: &Path) {
        let parsed: Table = match text.parse() {
            Ok(t) => t,
            Err(e) => {
                self.errors.push(format!("{}: {e}", path.display()));
                return;
            }
        };
        for (section, body) in parsed {
            match body {
                Value::Table(keys) if self.table.contains_key(&section) => {
                    for (key, value) in keys {
                        self.set(&section, &key, value, Source::File);
                    }
                }
                Value::Table(_) => self.errors.push(format!("{section}: unknown section (config file)")),
                other => self.errors.push(format!(
                    "{section}: expected a [section] table, got {} (config file)",
                    type_name(&other)
                )),
            }
        }
    }

    /// Applies `MLMKIT_<SECTION>_<KEY>` variables; unknown ones are errors.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) {
        let mut known = BTreeMap::new();
        for (section, keys) in &self.table {
            for key in keys.as_table().expect("sections are tables").keys() {
                let var = format!("{ENV_PREFIX}{}_{}", section.to_uppercase(), key.to_uppercase());
                known.insert(var, (section.clone(), key.clone()));
            }
        }
        for (var, raw) in vars {
            if !var.starts_with(ENV_PREFIX) {
                continue;
            }
            match known.get(&var) {
                Some((section, key)) => {
                    let template = &self.table[section.as_str()][key.as_str()];
                    let value = parse_env_value(template, &raw);
                    let (section, key) = (section.clone(), key.clone());
                    self.set(&section, &key, value, Source::Env(var));
                }
                None => self.errors.push(format!("{var}: no such configuration key")),
            }
        }
    }

    pub fn apply_flags(&mut self, flags: &FlagOverrides) {
        if let Some(seed) = flags.seed {
            self.set(
                "run",
                "seed",
                Value::Integer(seed as i64),
                Source::Flag("--seed".into()),
            );
        }
        if let Some(threads) = flags.threads {
            self.set(
                "run",
                "threads",
                Value::Integer(threads as i64),
                Source::Flag("--threads".into()),
            );
        }
    }

    /// Typed configuration, or every problem found while layering and
    /// validating.
    #[cfg(test)]
    pub fn finish(self, base_dir: PathBuf) -> Result<ResolvedConfig, Vec<String>> {
        self.finish_with_inputs(base_dir, &[], &[]).map(|(c, _)| c)
    }

    /// Like [`Layering::finish`], also resolving the input files a command
    /// reads so that missing files are reported with the other problems.
    pub fn finish_with_inputs(
        self,
        base_dir: PathBuf,
        required: &[&str],
        optional: &[&str],
    ) -> Result<(ResolvedConfig, BTreeMap<String, PathBuf>), Vec<String>> {
        let mut errors = self.errors;
        let config: ExperimentConfig = match Value::Table(self.table).try_into() {
            Ok(c) => c,
            Err(e) => {
                errors.push(e.to_string());
                return Err(errors);
            }
        };
        let resolved = ResolvedConfig {
            config,
            provenance: self.provenance,
            base_dir,
        };
        errors.extend(resolved.violations());
        let (inputs, missing) = resolved.resolve_inputs(required, optional);
        errors.extend(missing);
        if errors.is_empty() {
            Ok((resolved, inputs))
        } else {
            Err(errors)
        }
    }
}

impl Default for Layering {
    fn default() -> Self {
        Layering::new()
    }
}

fn problems(errors: &[String]) -> anyhow::Error {
    let noun = if errors.len() == 1 { "problem" } else { "problems" };
    anyhow::anyhow!(
        "invalid configuration ({} {noun}):\n  - {}",
        errors.len(),
        errors.join("\n  - ")
    )
}

/// Loads `path` (if given), applies the process environment and `flags`,
/// and resolves the input files named by `required` and `optional` keys.
pub fn load(
    path: Option<&Path>,
    flags: &FlagOverrides,
    required: &[&str],
    optional: &[&str],
) -> Result<(ResolvedConfig, BTreeMap<String, PathBuf>)> {
    let mut layers = Layering::new();
    let mut base_dir = PathBuf::from(".");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        layers.apply_file(&text, path);
        base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if base_dir.as_os_str().is_empty() {
            base_dir = PathBuf::from(".");
        }
    }
    layers.apply_env(std::env::vars());
    layers.apply_flags(flags);
    layers
        .finish_with_inputs(base_dir, required, optional)
        .map_err(|e| problems(&e))
}

impl ResolvedConfig {
    /// A data path resolved against the config file's directory, if set.
    pub fn path(&self, raw: &str) -> Option<PathBuf> {
        if raw.is_empty() {
            return None;
        }
        let p = Path::new(raw);
        Some(if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        })
    }

    fn raw_path(&self, key: &str) -> &str {
        let c = &self.config;
        match key {
            "data.corpus" => &c.data.corpus,
            "data.train" => &c.data.train,
            "data.test" => &c.data.test,
            "data.sentiment" => &c.data.sentiment,
            "probe.encoder" => &c.probe.encoder,
            _ => panic!("{key} is not a path key"),
        }
    }

    /// Resolves the input files a command reads. Keys in `required` must be
    /// set; every set key must name an existing file. All problems are
    /// reported together.
    #[cfg(test)]
    pub fn inputs(&self, required: &[&str], optional: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
        let (found, missing) = self.resolve_inputs(required, optional);
        if !missing.is_empty() {
            return Err(problems(&missing));
        }
        Ok(found)
    }

    fn resolve_inputs(&self, required: &[&str], optional: &[&str]) -> (BTreeMap<String, PathBuf>, Vec<String>) {
        let mut found = BTreeMap::new();
        let mut missing = Vec::new();
        for (key, needed) in required
            .iter()
            .map(|k| (k, true))
            .chain(optional.iter().map(|k| (k, false)))
        {
            match self.path(self.raw_path(key)) {
                None if needed => missing.push(format!("{key}: required by this command but not set")),
                None => {}
                Some(p) if !p.is_file() => missing.push(format!("{key}: file {} does not exist", p.display())),
                Some(p) => {
                    found.insert(key.to_string(), p);
                }
            }
        }
        (found, missing)
    }

    fn violations(&self) -> Vec<String> {
        let c = &self.config;
        let mut v = Vec::new();
        if c.run.threads == 0 {
            v.push("run.threads: must be at least 1".into());
        }
        if c.tokenizer.vocab_cap < MIN_VOCAB {
            v.push(format!(
                "tokenizer.vocab_cap: must be at least {MIN_VOCAB}, got {}",
                c.tokenizer.vocab_cap
            ));
        }
        if let Err(e) = self.transformer(MIN_VOCAB).validate() {
            v.push(format!("model: {e}"));
        }
        if c.model.max_positions < 8 {
            v.push("model.max_positions: must be at least 8".into());
        }
        if let Err(e) = self.schedule().validate() {
            v.push(format!("pretrain: {e}"));
        }
        if let Err(e) = c.adam.validate() {
            v.push(format!("adam: {e}"));
        }
        if c.pretrain.batch_size == 0 {
            v.push("pretrain.batch_size: must be positive".into());
        }
        if !(c.pretrain.mask_prob > 0.0 && c.pretrain.mask_prob < 1.0) {
            v.push(format!(
                "pretrain.mask_prob: must be in (0, 1), got {}",
                c.pretrain.mask_prob
            ));
        }
        let t = &c.tagger;
        if [
            t.word_dim,
            t.char_dim,
            t.char_hidden,
            t.hidden,
            t.layers,
            t.arc_dim,
            t.batch_size,
        ]
        .contains(&0)
        {
            v.push("tagger: dimensions, layers and batch_size must be positive".into());
        }
        if !(t.learning_rate > 0.0) {
            v.push(format!(
                "tagger.learning_rate: must be positive, got {}",
                t.learning_rate
            ));
        }
        let s = &c.sentiment;
        if s.lr_grid.is_empty() || s.lr_grid.iter().any(|&lr| !(lr > 0.0)) {
            v.push("sentiment.lr_grid: needs at least one positive learning rate".into());
        }
        if s.folds < 2 {
            v.push(format!("sentiment.folds: must be at least 2, got {}", s.folds));
        }
        if !(s.dev_fraction > 0.0 && s.dev_fraction < 1.0) {
            v.push(format!(
                "sentiment.dev_fraction: must be in (0, 1), got {}",
                s.dev_fraction
            ));
        }
        if s.epochs < 2 || s.batch_size == 0 {
            v.push("sentiment: needs at least 2 epochs and a positive batch_size".into());
        }
        v
    }

    pub fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        let m = &self.config.model;
        TransformerConfig {
            layers: m.layers,
            hidden: m.hidden,
            heads: m.heads,
            ffn: m.ffn,
            vocab_size,
            max_positions: m.max_positions,
            eps: m.eps,
        }
    }

    pub fn schedule(&self) -> Schedule {
        let p = &self.config.pretrain;
        Schedule::PolynomialDecay {
            warmup_steps: p.warmup_steps,
            peak_lr: p.peak_lr,
            total_steps: p.steps,
            power: p.power,
            end_lr: p.end_lr,
        }
    }

    pub fn pretrain(&self, vocab_size: usize) -> PretrainConfig {
        let p = &self.config.pretrain;
        PretrainConfig {
            model: self.transformer(vocab_size),
            schedule: self.schedule(),
            adam: self.config.adam.clone(),
            batch_size: p.batch_size,
            mask_prob: p.mask_prob,
            steps: p.steps,
            seed: self.config.run.seed,
        }
    }

    pub fn sentiment(&self) -> SentimentConfig {
        let s = self.config.sentiment.clone();
        SentimentConfig {
            lr_grid: s.lr_grid,
            folds: s.folds,
            dev_fraction: s.dev_fraction,
            epochs: s.epochs,
            frozen_lr: s.frozen_lr,
            warmup_epochs: s.warmup_epochs,
            decay_epochs: s.decay_epochs,
            batch_size: s.batch_size,
            seed: self.config.run.seed,
        }
    }

    /// The snapshot written next to every command's outputs.
    pub fn snapshot(&self, command: &str) -> String {
        let mut doc = Table::new();
        let mut meta = Table::new();
        meta.insert("command".into(), Value::String(command.into()));
        meta.insert("seed".into(), Value::Integer(self.config.run.seed as i64));
        meta.insert("threads".into(), Value::Integer(self.config.run.threads as i64));
        meta.insert("mlmkit_version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        doc.insert("meta".into(), Value::Table(meta));
        let body = Table::try_from(&self.config).expect("config serializes");
        doc.extend(body);
        let sources: Table = self
            .provenance
            .iter()
            .map(|(k, s)| (k.clone(), Value::String(s.to_string())))
            .collect();
        doc.insert("provenance".into(), Value::Table(sources));
        toml::to_string_pretty(&doc).expect("snapshot serializes")
    }
}
