//! Run configuration: TOML files layered over named profiles.
//!
//! A run file picks a `profile` ("fisher", "teden2zh" or "toy") and overrides
//! any of its tables. Keys are checked strictly; relative paths resolve
//! against the file's directory, except `paths.output_dir`, which resolves
//! against `$S2ST_OUTPUT_ROOT` when that is set.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::data::{
    Client, DataError, FilterRule, Lexicon, OovPolicy, PhoneSet, ReplayClient, SubprocessClient, ToySpec, Transcript,
};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::{FeatureConfig, StageConfig, StageKind};

pub const OUTPUT_ROOT_ENV: &str = "S2ST_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("`{key}`: {rule}")]
    Invalid { key: String, rule: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(key: impl Into<String>, rule: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid {
        key: key.into(),
        rule: rule.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Fisher,
    Teden2zh,
    Toy,
}

/// Optimisation defaults every stage of a profile starts from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageDefaults {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub batch_tokens: usize,
    pub dropout: f64,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Fisher => "fisher",
            Profile::Teden2zh => "teden2zh",
            Profile::Toy => "toy",
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Profile::Fisher => ModelConfig::fisher(),
            Profile::Teden2zh => ModelConfig::teden2zh(),
            Profile::Toy => ModelConfig::toy(),
        }
    }

    pub fn features(self) -> FeatureConfig {
        match self {
            Profile::Fisher | Profile::Toy => FeatureConfig {
                src_sr: 8000,
                tgt_sr: 24000,
            },
            Profile::Teden2zh => FeatureConfig {
                src_sr: 16000,
                tgt_sr: 24000,
            },
        }
    }

    pub fn stage_defaults(self) -> StageDefaults {
        match self {
            Profile::Fisher => StageDefaults {
                base_lr: 0.006,
                warmup_steps: 4000,
                batch_tokens: 60000,
                dropout: 0.1,
            },
            Profile::Teden2zh => StageDefaults {
                base_lr: 0.0015,
                warmup_steps: 4000,
                batch_tokens: 45000,
                dropout: 0.1,
            },
            Profile::Toy => StageDefaults {
                base_lr: 2e-3,
                warmup_steps: 100,
                batch_tokens: 100,
                dropout: 0.1,
            },
        }
    }
}

/// Manifests the stages and evaluation read, and the run's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub primary: Option<PathBuf>,
    #[serde(default)]
    pub secondary: Option<PathBuf>,
    /// Held-out manifest for `evaluate`.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            primary: None,
            secondary: None,
            eval: None,
            output_dir: default_output_dir(),
        }
    }
}

/// An external client: a line-protocol subprocess, or a saved transcript to
/// replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    #[serde(default)]
    pub command: Option<Vec<String>>,
    #[serde(default)]
    pub replay: Option<PathBuf>,
}

impl ClientSpec {
    pub fn build(&self) -> std::result::Result<Box<dyn Client>, DataError> {
        match (&self.command, &self.replay) {
            (Some(cmd), None) if !cmd.is_empty() => Ok(Box::new(SubprocessClient::new(&cmd[0], cmd[1..].to_vec()))),
            (None, Some(path)) => Ok(Box::new(ReplayClient::new(&Transcript::load(path)?))),
            _ => Err(DataError::Contract("client needs exactly one of `command` or `replay`".into())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    #[serde(default)]
    pub mt: Option<ClientSpec>,
    #[serde(default)]
    pub tts: Option<ClientSpec>,
    #[serde(default)]
    pub asr: Option<ClientSpec>,
}

/// Turns an ASR manifest into a pseudo S2ST manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub input: PathBuf,
    /// Written manifest; defaults to `paths.secondary`.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Applied in order; defaults to dropping failed and empty-text records.
    #[serde(default = "default_filters")]
    pub filters: Vec<FilterRule>,
    /// How source and target text become phone ids; unset keeps the ids
    /// already in the manifest.
    #[serde(default)]
    pub src_phones: Option<PhoneSource>,
    #[serde(default)]
    pub tgt_phones: Option<PhoneSource>,
    #[serde(default = "default_oov")]
    pub oov: OovPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PhoneSource {
    /// Word-to-phones TSV, see [`load_lexicon`].
    Lexicon(PathBuf),
    /// Text is already phone symbols; the file lists the inventory, one
    /// symbol per line, in id order.
    Inventory(PathBuf),
}

impl PhoneSource {
    pub fn path(&self) -> &Path {
        match self {
            PhoneSource::Lexicon(p) | PhoneSource::Inventory(p) => p,
        }
    }

    fn path_mut(&mut self) -> &mut PathBuf {
        match self {
            PhoneSource::Lexicon(p) | PhoneSource::Inventory(p) => p,
        }
    }
}

fn default_filters() -> Vec<FilterRule> {
    vec![FilterRule::SynthesisFailed, FilterRule::EmptyText]
}

fn default_oov() -> OovPolicy {
    OovPolicy::Error
}

/// Synthetic two-domain corpus written by `gen-toy` to `paths.primary`,
/// `paths.secondary` and `paths.eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub n_phones: usize,
    pub n_primary: usize,
    pub n_secondary: usize,
    /// Held-out primary-domain utterances.
    #[serde(default)]
    pub n_eval: usize,
    /// Source phones whose target differs between the domains.
    #[serde(default)]
    pub conflicts: usize,
    #[serde(default)]
    pub noise: Option<f64>,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ToyConfig {
    /// Specs of the training corpus and of the held-out one. The held-out
    /// corpus shares vocabularies and mappings but draws its own utterances.
    pub fn specs(&self, run_seed: u64) -> (ToySpec, ToySpec) {
        let seed = self.seed.unwrap_or(run_seed);
        let mut train = ToySpec::standard(self.n_phones, self.n_primary, self.n_secondary, self.conflicts, seed);
        if let Some(noise) = self.noise {
            train.noise = noise;
        }
        let mut eval = train.clone();
        eval.seed = seed + 1000;
        eval.n_primary = self.n_eval;
        eval.n_secondary = 0;
        eval.id_prefix = "eval-".into();
        (train, eval)
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    /// In execution order.
    pub stages: Vec<StageConfig>,
    pub paths: PathsConfig,
    pub clients: ClientsConfig,
    pub prepare: Option<PrepareConfig>,
    pub toy: Option<ToyConfig>,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn stage(&self, kind: StageKind) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.kind == kind)
    }

    /// Stage whose final checkpoint a `kind` stage starts from.
    pub fn predecessor(&self, kind: StageKind) -> Option<StageKind> {
        let i = self.stages.iter().position(|s| s.kind == kind)?;
        (kind != StageKind::Pretrain && i > 0 && self.stages[0].kind == StageKind::Pretrain)
            .then_some(StageKind::Pretrain)
    }

    pub fn stage_dir(&self, kind: StageKind) -> PathBuf {
        self.paths.output_dir.join(kind.name())
    }

    pub fn final_checkpoint(&self, kind: StageKind) -> PathBuf {
        self.stage_dir(kind).join(format!("{}-final.ckpt", kind.name()))
    }

    pub fn prepare_output(&self) -> Option<PathBuf> {
        let p = self.prepare.as_ref()?;
        p.output.clone().or_else(|| self.paths.secondary.clone())
    }
}

/// Reads a phone inventory: one symbol per line, blank lines ignored.
pub fn load_inventory(path: &Path) -> Result<PhoneSet> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    PhoneSet::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()).map_err(|e| {
        ConfigError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    })
}

/// Reads a lexicon with one `word<TAB>phone phone ...` entry per line.
pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((word, phones)) = line.split_once('\t') else {
            return Err(ConfigError::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: expected word<TAB>phones", i + 1),
            });
        };
        pairs.push((word.trim().to_string(), phones.split_whitespace().map(str::to_string).collect::<Vec<_>>()));
    }
    Ok(Lexicon::from_pairs(pairs))
}

/// Parses and validates a run file.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    load_config_with(path, &[])
}

/// Like [`load_config`], applying `key.path=value` overrides first. Values
/// are TOML literals; anything that does not parse is taken as a string.
pub fn load_config_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut table: Table = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let output_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    resolve(table, &base, output_root.as_deref())
}

/// Sets one dotted key; numeric segments index arrays (`stages.0.max_steps`).
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return invalid(assignment, "override must look like key=value");
    };
    let key = key.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return invalid(key, "empty key segment");
    }
    let mut root = Value::Table(std::mem::take(table));
    let r = set_path(&mut root, &parts, value, key);
    if let Value::Table(t) = root {
        *table = t;
    }
    r
}

fn set_path(cur: &mut Value, parts: &[&str], value: Value, key: &str) -> Result<()> {
    let (part, rest) = (parts[0], &parts[1..]);
    let next = match cur {
        Value::Table(t) => {
            if rest.is_empty() {
                t.insert(part.to_string(), value);
                return Ok(());
            }
            t.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()))
        }
        Value::Array(a) => {
            let Ok(idx) = part.parse::<usize>() else {
                return invalid(key, format!("`{part}` is not an array index"));
            };
            let n = a.len();
            let Some(slot) = a.get_mut(idx) else {
                return invalid(key, format!("index {idx} out of {n} entries"));
            };
            if rest.is_empty() {
                *slot = value;
                return Ok(());
            }
            slot
        }
        _ => return invalid(key, format!("`{part}` is inside a non-table value")),
    };
    set_path(next, rest, value, key)
}

fn take_table(table: &mut Table, key: &str) -> Result<Table> {
    match table.remove(key) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => invalid(key, "must be a table"),
    }
}

/// Deserialises `over` laid on top of `base`, reporting errors under `key`.
fn layered<T: Serialize + DeserializeOwned>(key: &str, base: &T, over: Table) -> Result<T> {
    let mut merged = match Value::try_from(base) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config structs serialise to tables"),
    };
    for (k, v) in over {
        merged.insert(k, v);
    }
    parse_value(key, Value::Table(merged))
}

fn parse_value<T: DeserializeOwned>(key: &str, v: Value) -> Result<T> {
    T::deserialize(v).map_err(|e| ConfigError::Invalid {
        key: key.to_string(),
        rule: e.to_string().trim().to_string(),
    })
}

fn resolve(mut table: Table, base: &Path, output_root: Option<&Path>) -> Result<RunConfig> {
    let profile: Profile = match table.remove("profile") {
        Some(v) => parse_value("profile", v)?,
        None => return invalid("profile", "required: one of fisher, teden2zh, toy"),
    };
    let seed: u64 = match table.remove("seed") {
        Some(v) => parse_value("seed", v)?,
        None => 0,
    };
    let model: ModelConfig = layered("model", &profile.model(), take_table(&mut table, "model")?)?;
    model.validate().or_else(|e| invalid("model", e.to_string()))?;
    let features: FeatureConfig = layered("features", &profile.features(), take_table(&mut table, "features")?)?;

    let defaults = profile.stage_defaults();
    let stages = match table.remove("stages") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .into_iter()
            .enumerate()
            .map(|(i, item)| {
                let key = format!("stages.{i}");
                let Value::Table(over) = item else {
                    return invalid(key, "must be a table");
                };
                let mut t = Table::new();
                t.insert("base_lr".into(), Value::Float(defaults.base_lr));
                t.insert("warmup_steps".into(), Value::Integer(defaults.warmup_steps as i64));
                t.insert("batch_tokens".into(), Value::Integer(defaults.batch_tokens as i64));
                t.insert("dropout".into(), Value::Float(defaults.dropout));
                t.insert("seed".into(), Value::Integer(seed as i64));
                t.extend(over);
                let stage: StageConfig = parse_value(&key, Value::Table(t))?;
                stage.validate(&model).or_else(|e| invalid(&key, e.to_string()))?;
                Ok(stage)
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return invalid("stages", "must be an array of tables"),
    };

    let mut paths: PathsConfig = parse_value("paths", Value::Table(take_table(&mut table, "paths")?))?;
    let clients: ClientsConfig = parse_value("clients", Value::Table(take_table(&mut table, "clients")?))?;
    let prepare: Option<PrepareConfig> = match table.remove("prepare") {
        Some(v) => Some(parse_value("prepare", v)?),
        None => None,
    };
    let toy: Option<ToyConfig> = match table.remove("toy") {
        Some(v) => Some(parse_value("toy", v)?),
        None => None,
    };
    let eval_table = take_table(&mut table, "eval")?;
    if eval_table.contains_key("features") {
        return invalid("eval.features", "set sample rates in the top-level [features] table");
    }
    let mut eval: EvalConfig = parse_value("eval", Value::Table(eval_table))?;
    eval.features = features;
    eval.decode.validate().or_else(|e| invalid("eval.decode", e.to_string()))?;

    if let Some(k) = table.keys().next() {
        return invalid(k.as_str(), "unknown key");
    }

    // Path resolution.
    let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    for p in [&mut paths.primary, &mut paths.secondary, &mut paths.eval].into_iter().flatten() {
        *p = abs(p);
    }
    if paths.output_dir.is_relative() {
        paths.output_dir = match output_root {
            Some(root) => root.join(&paths.output_dir),
            None => base.join(&paths.output_dir),
        };
    }
    let mut clients = clients;
    for (name, spec) in [("mt", &mut clients.mt), ("tts", &mut clients.tts), ("asr", &mut clients.asr)] {
        let Some(spec) = spec else { continue };
        let key = format!("clients.{name}");
        match (&mut spec.command, &mut spec.replay) {
            (Some(cmd), None) => {
                if cmd.is_empty() {
                    return invalid(key + ".command", "must name a program");
                }
                // Bare names are looked up on PATH when the client starts.
                if cmd[0].contains('/') {
                    cmd[0] = abs(Path::new(&cmd[0])).to_string_lossy().into_owned();
                }
            }
            (None, Some(r)) => *r = abs(r),
            _ => return invalid(key, "needs exactly one of `command` or `replay`"),
        }
    }
    let mut prepare = prepare;
    if let Some(p) = prepare.as_mut() {
        p.input = abs(&p.input);
        for src in [&mut p.src_phones, &mut p.tgt_phones].into_iter().flatten() {
            let l = src.path_mut();
            *l = abs(l);
        }
        if let Some(o) = p.output.as_mut() {
            *o = abs(o);
        }
        for (i, f) in p.filters.iter().enumerate() {
            f.validate().or_else(|e| invalid(format!("prepare.filters.{i}"), e.to_string()))?;
        }
        if p.output.is_none() && paths.secondary.is_none() {
            return invalid("prepare.output", "needed when paths.secondary is unset");
        }
    }
    if let Some(t) = &toy {
        if t.n_phones == 0 || t.n_primary == 0 {
            return invalid("toy", "n_phones and n_primary must be positive");
        }
        if t.n_phones + 2 > model.src_phone_vocab || t.n_phones + 2 > model.tgt_phone_vocab {
            return invalid("toy.n_phones", "exceeds the model's phone vocabularies");
        }
        for (k, p) in [("paths.primary", &paths.primary), ("paths.secondary", &paths.secondary)] {
            if p.is_none() {
                return invalid(k, "needed by [toy]");
            }
        }
        if t.n_eval > 0 && paths.eval.is_none() {
            return invalid("paths.eval", "needed when toy.n_eval > 0");
        }
        let (train, _) = t.specs(seed);
        train.validate().or_else(|e| invalid("toy", e.to_string()))?;
    }

    let config = RunConfig {
        profile,
        seed,
        model,
        features,
        stages,
        paths,
        clients,
        prepare,
        toy,
        eval,
    };
    check_order(&config)?;
    check_inputs(&config)?;
    Ok(config)
}

fn check_order(c: &RunConfig) -> Result<()> {
    for (i, s) in c.stages.iter().enumerate() {
        if c.stages[..i].iter().any(|t| t.kind == s.kind) {
            return invalid(format!("stages.{i}.kind"), format!("duplicate {} stage", s.kind.name()));
        }
        if s.kind == StageKind::Pretrain && i > 0 {
            return invalid(format!("stages.{i}.kind"), "pretrain must come before finetune, mixed and prompt");
        }
        let (need_primary, need_secondary) = match s.kind {
            StageKind::Pretrain => (false, true),
            StageKind::Finetune => (true, false),
            StageKind::Mixed | StageKind::Prompt => (true, true),
        };
        if need_primary && c.paths.primary.is_none() {
            return invalid("paths.primary", format!("needed by the {} stage", s.kind.name()));
        }
        if need_secondary && c.paths.secondary.is_none() {
            return invalid("paths.secondary", format!("needed by the {} stage", s.kind.name()));
        }
    }
    Ok(())
}

/// Every input path must exist unless this config also produces it: the
/// toy manifests and everything under `<output_dir>/toy`, and the prepared
/// manifest.
fn check_inputs(c: &RunConfig) -> Result<()> {
    let produced = |p: &Path| {
        let by_toy = c.toy.is_some()
            && ([&c.paths.primary, &c.paths.secondary, &c.paths.eval]
                .into_iter()
                .flatten()
                .any(|q| q == p)
                || p.starts_with(c.paths.output_dir.join("toy")));
        by_toy || c.prepare_output().as_deref() == Some(p)
    };
    let mut inputs: Vec<(String, &Path)> = Vec::new();
    for (k, p) in [("paths.primary", &c.paths.primary), ("paths.secondary", &c.paths.secondary), ("paths.eval", &c.paths.eval)] {
        if let Some(p) = p {
            inputs.push((k.into(), p));
        }
    }
    if let Some(p) = &c.prepare {
        inputs.push(("prepare.input".into(), &p.input));
        if let Some(l) = &p.src_phones {
            inputs.push(("prepare.src_phones".into(), l.path()));
        }
        if let Some(l) = &p.tgt_phones {
            inputs.push(("prepare.tgt_phones".into(), l.path()));
        }
    }
    for (name, spec) in [("mt", &c.clients.mt), ("tts", &c.clients.tts), ("asr", &c.clients.asr)] {
        let Some(spec) = spec else { continue };
        if let Some(r) = &spec.replay {
            inputs.push((format!("clients.{name}.replay"), r));
        }
        if let Some(cmd) = &spec.command {
            if cmd[0].contains('/') {
                inputs.push((format!("clients.{name}.command"), Path::new(&cmd[0])));
            }
        }
    }
    for (key, p) in inputs {
        if !produced(p) && !p.exists() {
            return invalid(key, format!("{} does not exist", p.display()));
        }
    }
    Ok(())
}
