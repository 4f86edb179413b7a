//! Declarative experiment runs and dataset validation.
//!
//! A run is a TOML file with a list of named stages. Later stages refer to
//! earlier ones by name; every stage writes into `<out_dir>/<name>` and the
//! run writes `run_manifest.json` with content digests of everything it
//! produced.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_pretraining_corpus, build_probe_dataset, closure_violations, disjointness_violations, parse_sequence,
    read_probe_data, read_probe_split, CorpusConfig, CorpusManifest, PairRecord, ProbeData, ProbeDataConfig,
    SplitSpec, CORPUS_FILE, MANIFEST_FILE,
};
use crate::directeval::direct_eval_checkpoint;
use crate::error::{Error, Result};
use crate::finetune::{finetune_pair_classifier, save_finetuned, FinetuneConfig};
use crate::grammar::{parse_str, Variant};
use crate::io;
use crate::neural::{random_init_model, train_alm, train_mlm, Arch, Checkpoint, ModelConfig, TrainConfig};
use crate::opacity::{
    read_facts, read_pairs, split_dataset, write_splits, Generator, OpacityPair, Shape, TemplateRegistry,
    VerbInventory,
};
use crate::probe::{eval_probe_on_bank, train_probe_on_bank, FeatureBank, MeanStd, Pooling, ProbeConfig, SavedProbe};
use crate::rng;
use crate::semantics::eval;
use crate::stats::{similarity_report, EmbeddingTable};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Stage seeds default to values derived from this and the stage name.
    #[serde(default)]
    pub seed: u64,
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Corpus(CorpusStage),
    ProbeData(ProbeDataStage),
    Pretrain(PretrainStage),
    RandomInit(RandomInitStage),
    Probe(ProbeStage),
    DirectEval(DirectEvalStage),
    Finetune(FinetuneStage),
    Opacity(OpacityStage),
    Similarity(SimilarityStage),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusStage {
    pub name: String,
    pub variant: Variant,
    pub n_sequences: usize,
    #[serde(default)]
    pub reflexivity: bool,
    #[serde(default)]
    pub symmetry: bool,
    #[serde(default)]
    pub per_sentence_cap: Option<usize>,
    #[serde(default)]
    pub max_sequence_tokens: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeDataStage {
    pub name: String,
    pub variant: Variant,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    #[serde(default)]
    pub max_sentence_tokens: Option<usize>,
    /// A corpus stage whose sentences the probe data must avoid.
    #[serde(default)]
    pub exclude: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Model preset plus optional overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub preset: Option<String>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_positions: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default)]
    pub preset: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub weight_decay: Option<f64>,
    pub mask_rate: Option<f64>,
    pub log_every: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainStage {
    pub name: String,
    pub corpus: String,
    pub arch: Arch,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomInitStage {
    pub name: String,
    pub arch: Arch,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeStage {
    pub name: String,
    pub encoder: String,
    pub data: String,
    pub pooling: Pooling,
    #[serde(default = "default_probe_seeds")]
    pub seeds: Vec<u64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_steps: Option<usize>,
    #[serde(default)]
    pub reference: bool,
}

fn default_probe_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectEvalStage {
    pub name: String,
    pub encoder: String,
    pub data: String,
    #[serde(default = "default_eval_split")]
    pub split: String,
    /// Evaluate at most this many distinct sentences.
    #[serde(default)]
    pub sentences: Option<usize>,
}

fn default_eval_split() -> String {
    "test".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneStage {
    pub name: String,
    pub encoder: String,
    pub data: String,
    pub pooling: Pooling,
    pub examples: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpacityStage {
    pub name: String,
    pub facts: PathBuf,
    pub shape: Shape,
    /// Number of coordinated pairs; ignored for simple pairs.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityStage {
    pub name: String,
    /// An opacity stage with simple pairs, or a pair file.
    pub pairs: String,
    pub embeddings: PathBuf,
    #[serde(default = "default_bootstrap")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_bootstrap() -> usize {
    1000
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Corpus(s) => &s.name,
            Stage::ProbeData(s) => &s.name,
            Stage::Pretrain(s) => &s.name,
            Stage::RandomInit(s) => &s.name,
            Stage::Probe(s) => &s.name,
            Stage::DirectEval(s) => &s.name,
            Stage::Finetune(s) => &s.name,
            Stage::Opacity(s) => &s.name,
            Stage::Similarity(s) => &s.name,
        }
    }

    pub fn kind(&self) -> StageKind {
        match self {
            Stage::Corpus(_) => StageKind::Corpus,
            Stage::ProbeData(_) => StageKind::ProbeData,
            Stage::Pretrain(_) => StageKind::Pretrain,
            Stage::RandomInit(_) => StageKind::RandomInit,
            Stage::Probe(_) => StageKind::Probe,
            Stage::DirectEval(_) => StageKind::DirectEval,
            Stage::Finetune(_) => StageKind::Finetune,
            Stage::Opacity(_) => StageKind::Opacity,
            Stage::Similarity(_) => StageKind::Similarity,
        }
    }

    /// Earlier stages this one reads, with the kinds each may be.
    fn dependencies(&self) -> Vec<(&str, &'static [StageKind])> {
        const ENCODERS: &[StageKind] = &[StageKind::Pretrain, StageKind::RandomInit, StageKind::Finetune];
        const PROBE_DATA: &[StageKind] = &[StageKind::ProbeData];
        match self {
            Stage::ProbeData(s) => s.exclude.iter().map(|e| (e.as_str(), &[StageKind::Corpus][..])).collect(),
            Stage::Pretrain(s) => vec![(s.corpus.as_str(), &[StageKind::Corpus][..])],
            Stage::Probe(s) => vec![(s.encoder.as_str(), ENCODERS), (s.data.as_str(), PROBE_DATA)],
            Stage::DirectEval(s) => vec![(s.encoder.as_str(), ENCODERS), (s.data.as_str(), PROBE_DATA)],
            Stage::Finetune(s) => vec![(s.encoder.as_str(), ENCODERS), (s.data.as_str(), PROBE_DATA)],
            Stage::Similarity(s) if !s.pairs.ends_with(".jsonl") => {
                vec![(s.pairs.as_str(), &[StageKind::Opacity][..])]
            }
            _ => Vec::new(),
        }
    }

    fn explicit_seed(&self) -> Option<u64> {
        match self {
            Stage::Corpus(s) => s.seed,
            Stage::ProbeData(s) => s.seed,
            Stage::Pretrain(s) => s.seed,
            Stage::RandomInit(s) => s.seed,
            Stage::Finetune(s) => s.seed,
            Stage::Opacity(s) => s.seed,
            Stage::Similarity(s) => s.seed,
            Stage::Probe(_) | Stage::DirectEval(_) => None,
        }
    }

    fn input_files(&self) -> Vec<&Path> {
        match self {
            Stage::Opacity(s) => vec![s.facts.as_path()],
            Stage::Similarity(s) => {
                let mut v = vec![s.embeddings.as_path()];
                if s.pairs.ends_with(".jsonl") {
                    v.push(Path::new(&s.pairs));
                }
                v
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Corpus,
    ProbeData,
    Pretrain,
    RandomInit,
    Probe,
    DirectEval,
    Finetune,
    Opacity,
    Similarity,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
    stages: Vec<toml::Table>,
}

fn field_error<E: std::fmt::Display>(prefix: &str, e: serde_path_to_error::Error<E>) -> Error {
    let path = e.path().to_string();
    let at = if path == "." { prefix.to_string() } else { format!("{prefix}.{path}") };
    Error::config(format!("at `{at}`: {}", e.inner()))
}

fn parse_stage(i: usize, mut table: toml::Table) -> Result<Stage> {
    let prefix = format!("stages[{i}]");
    let kind = match table.remove("kind") {
        Some(toml::Value::String(k)) => k,
        Some(_) => return Err(Error::config(format!("at `{prefix}.kind`: expected a string"))),
        None => return Err(Error::config(format!("at `{prefix}`: missing field `kind`"))),
    };
    fn de<T: serde::de::DeserializeOwned>(prefix: &str, t: toml::Table) -> Result<T> {
        serde_path_to_error::deserialize(toml::Value::Table(t)).map_err(|e| field_error(prefix, e))
    }
    Ok(match kind.as_str() {
        "corpus" => Stage::Corpus(de(&prefix, table)?),
        "probe_data" => Stage::ProbeData(de(&prefix, table)?),
        "pretrain" => Stage::Pretrain(de(&prefix, table)?),
        "random_init" => Stage::RandomInit(de(&prefix, table)?),
        "probe" => Stage::Probe(de(&prefix, table)?),
        "direct_eval" => Stage::DirectEval(de(&prefix, table)?),
        "finetune" => Stage::Finetune(de(&prefix, table)?),
        "opacity" => Stage::Opacity(de(&prefix, table)?),
        "similarity" => Stage::Similarity(de(&prefix, table)?),
        other => return Err(Error::config(format!("at `{prefix}.kind`: unknown stage kind {other:?}"))),
    })
}

/// Parses a run config; errors name the offending field path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| field_error("config", e))?;
    Ok(ExperimentConfig {
        name: raw.name,
        out_dir: raw.out_dir,
        seed: raw.seed,
        stages: raw
            .stages
            .into_iter()
            .enumerate()
            .map(|(i, t)| parse_stage(i, t))
            .collect::<Result<_>>()?,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("at `stages`: the stage list is empty"));
        }
        let mut kinds: HashMap<&str, StageKind> = HashMap::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let name = stage.name();
            let valid_name = !name.is_empty()
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !valid_name {
                return Err(Error::config(format!("at `stages[{i}].name`: invalid stage name {name:?}")));
            }
            for (dep, allowed) in stage.dependencies() {
                match kinds.get(dep) {
                    Some(k) if allowed.contains(k) => {}
                    Some(k) => {
                        return Err(Error::config(format!(
                            "at `stages[{i}]`: stage {name:?} cannot read {dep:?}, a {k:?} stage"
                        )))
                    }
                    None => {
                        return Err(Error::config(format!(
                            "at `stages[{i}]`: stage {name:?} refers to {dep:?}, which is not an earlier stage"
                        )))
                    }
                }
            }
            for f in stage.input_files() {
                if !f.exists() {
                    return Err(Error::config(format!(
                        "at `stages[{i}]`: input file {} does not exist",
                        f.display()
                    )));
                }
            }
            if let Stage::Opacity(o) = stage {
                if o.shape == Shape::Coordinated && o.n.is_none() {
                    return Err(Error::config(format!("at `stages[{i}].n`: coordinated pairs need a count")));
                }
            }
            if kinds.insert(name, stage.kind()).is_some() {
                return Err(Error::config(format!("at `stages[{i}].name`: duplicate stage name {name:?}")));
            }
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &Stage) -> u64 {
        stage
            .explicit_seed()
            .unwrap_or_else(|| rng::derive_seed(self.seed, stage.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    NotRun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub kind: StageKind,
    pub status: StageStatus,
    /// False for outputs of a failed or skipped stage.
    pub valid: bool,
    pub seed: u64,
    pub seconds: f64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub metrics: serde_json::Value,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub command_line: Vec<String>,
    pub config_file: Option<String>,
    pub config_digest: String,
    pub run_seed: u64,
    pub out_dir: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub versions: BTreeMap<String, String>,
    pub valid: bool,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Digests of every output, keyed by path relative to the run directory.
    pub fn output_digests(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .flat_map(|s| s.outputs.iter().map(|f| (f.path.clone(), f.sha256.clone())))
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Validation(Error),
    #[error("stage {stage:?} failed: {error}")]
    Stage {
        stage: String,
        error: Error,
        manifest: Box<RunManifest>,
    },
}

impl RunError {
    /// 1 for configuration problems, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 1,
            RunError::Stage { .. } => 2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the config's `out_dir`.
    pub out_dir: Option<PathBuf>,
    pub force: bool,
    pub command_line: Vec<String>,
    pub config_file: Option<PathBuf>,
    /// Receives one line per stage event.
    pub verbose: bool,
}

/// Refuses to write into a non-empty directory unless `force` is set.
pub fn ensure_empty_or_force(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::config(format!(
                "output path {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        if non_empty {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn digests_under(root: &Path, dir: &Path) -> Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&d)
            .map_err(|e| Error::io(&d, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&d, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(FileDigest {
                    path: p.strip_prefix(root).unwrap_or(&p).display().to_string(),
                    sha256: io::file_digest(&p)?,
                });
            }
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl ModelSpec {
    pub fn resolve(&self, arch: Arch, seed: u64) -> Result<ModelConfig> {
        model_config(self, arch, seed)
    }
}

impl TrainSpec {
    pub fn resolve(&self, arch: Arch, seed: u64) -> Result<TrainConfig> {
        train_config(self, arch, seed)
    }
}

fn model_config(spec: &ModelSpec, arch: Arch, seed: u64) -> Result<ModelConfig> {
    let mut c = match spec.preset.as_deref().unwrap_or("desk") {
        "desk" => ModelConfig::desk(arch, seed),
        "tiny" => ModelConfig::tiny(arch, seed),
        "reference" => ModelConfig::reference(arch, seed),
        other => return Err(Error::config(format!("unknown model preset {other:?}"))),
    };
    if let Some(v) = spec.d_model {
        c.d_model = v;
    }
    if let Some(v) = spec.n_layers {
        c.n_layers = v;
    }
    if let Some(v) = spec.n_heads {
        c.n_heads = v;
    }
    if let Some(v) = spec.d_ff {
        c.d_ff = v;
    }
    if let Some(v) = spec.max_positions {
        c.max_positions = v;
    }
    if let Some(v) = spec.dropout {
        c.dropout = v;
    }
    c.validate()?;
    Ok(c)
}

fn train_config(spec: &TrainSpec, arch: Arch, seed: u64) -> Result<TrainConfig> {
    let mut c = match spec.preset.as_deref().unwrap_or("desk") {
        "desk" => TrainConfig::desk(arch, seed),
        "reference" => TrainConfig::reference(arch, seed),
        other => return Err(Error::config(format!("unknown training preset {other:?}"))),
    };
    if let Some(v) = spec.steps {
        c.steps = v;
    }
    if let Some(v) = spec.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = spec.lr {
        c.lr = v;
    }
    if let Some(v) = spec.warmup_steps {
        c.warmup_steps = v;
    }
    if let Some(v) = spec.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = spec.mask_rate {
        c.mask_rate = v;
    }
    if let Some(v) = spec.log_every {
        c.log_every = v;
    }
    c.validate(arch)?;
    Ok(c)
}

/// Distinct parsed sentences of a probe split, in first-seen order.
pub fn split_sentences(records: &[PairRecord]) -> Result<(Vec<crate::grammar::SynTree>, Variant)> {
    let variant = records
        .first()
        .map(|r| r.variant)
        .ok_or_else(|| Error::EmptyDataset("split has no records".into()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for r in records {
        for s in [&r.a, &r.b] {
            if seen.insert(s.as_str()) {
                out.push(parse_str(s)?);
            }
        }
    }
    Ok((out, variant))
}

struct Runner {
    root: PathBuf,
    verbose: bool,
}

impl Runner {
    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn checkpoint(&self, stage: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.dir(stage).join(CHECKPOINT_DIR))
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn run_stage(&self, stage: &Stage, seed: u64) -> Result<serde_json::Value> {
        let out = self.dir(stage.name());
        io::create_dir(&out)?;
        Ok(match stage {
            Stage::Corpus(s) => {
                let mut c = CorpusConfig::new(s.variant, s.n_sequences, seed).with_closure(s.reflexivity, s.symmetry);
                if let Some(cap) = s.per_sentence_cap {
                    c = c.with_sentence_cap(cap);
                }
                if let Some(m) = s.max_sequence_tokens {
                    c.max_sequence_tokens = m;
                }
                let m = build_pretraining_corpus(&c, &out)?;
                serde_json::json!({
                    "lines": m.lines,
                    "mean_sentence_tokens": m.mean_sentence_tokens,
                    "truncated_tail": m.truncated_tail,
                })
            }
            Stage::ProbeData(s) => {
                let mut c = ProbeDataConfig::new(s.variant, seed);
                if let Some(cap) = s.max_sentence_tokens {
                    c = c.with_sentence_cap(cap);
                }
                let split = SplitSpec {
                    train_pairs: s.train_pairs,
                    valid_pairs: s.valid_pairs,
                    test_pairs: s.test_pairs,
                };
                let exclude = s.exclude.as_ref().map(|e| self.dir(e).join(CORPUS_FILE));
                let m = build_probe_dataset(&c, split, &out, exclude.as_deref())?;
                serde_json::json!({ "disjoint": m.disjoint, "excluded_sentences": m.excluded_sentences })
            }
            Stage::Pretrain(s) => {
                let mc = model_config(&s.model, s.arch, seed)?;
                let tc = train_config(&s.train, s.arch, seed)?;
                let corpus = self.dir(&s.corpus).join(CORPUS_FILE);
                let log = |step: usize, loss: f64| self.log(&format!("  {}: step {step} loss {loss:.4}", s.name));
                let (ckpt, report) = match s.arch {
                    Arch::Alm => train_alm(&corpus, &mc, &tc, log)?,
                    Arch::Mlm => train_mlm(&corpus, &mc, &tc, log)?,
                };
                ckpt.save(&out.join(CHECKPOINT_DIR))?;
                io::write_json(&out.join("train_history.json"), &report.history)?;
                serde_json::json!({
                    "first_loss": report.first_loss,
                    "final_loss": report.final_loss,
                    "steps": report.steps,
                    "tokens_seen": report.tokens_seen,
                    "params_digest": ckpt.digest(),
                })
            }
            Stage::RandomInit(s) => {
                let mc = model_config(&s.model, s.arch, seed)?;
                let ckpt = random_init_model(&mc, seed)?;
                ckpt.save(&out.join(CHECKPOINT_DIR))?;
                serde_json::json!({ "params_digest": ckpt.digest() })
            }
            Stage::Probe(s) => {
                let enc = self.checkpoint(&s.encoder)?;
                let data = read_probe_data(&self.dir(&s.data))?;
                let bank = FeatureBank::from_encoder(&enc, s.pooling, &[&data.train, &data.valid, &data.test])?;
                let mut accs = Vec::new();
                let mut per_seed = Vec::new();
                for &ps in &s.seeds {
                    let mut pc = if s.reference {
                        ProbeConfig::reference(s.pooling, ps)
                    } else {
                        ProbeConfig::desk(s.pooling, ps)
                    };
                    if let Some(v) = s.lr {
                        pc.lr = v;
                    }
                    if let Some(v) = s.epochs {
                        pc.epochs = v;
                    }
                    if let Some(v) = s.batch_size {
                        pc.batch_size = v;
                    }
                    if let Some(v) = s.warmup_steps {
                        pc.warmup_steps = v;
                    }
                    let (probe, report) = train_probe_on_bank(&bank, &data.train, &data.valid, &pc)?;
                    let test = eval_probe_on_bank(&bank, &probe, &data.test)?;
                    self.log(&format!("  {}: seed {ps} test accuracy {:.4}", s.name, test.accuracy));
                    accs.push(test.accuracy);
                    SavedProbe {
                        probe,
                        config: Some(pc),
                        report: Some(report.clone()),
                        encoder_digest: Some(enc.digest()),
                    }
                    .save(&out.join(format!("seed_{ps}")))?;
                    per_seed.push(serde_json::json!({
                        "seed": ps,
                        "test": test,
                        "best_epoch": report.best_epoch,
                        "best_valid_accuracy": report.best_valid_accuracy,
                    }));
                }
                let summary = MeanStd::of(&accs);
                let v = serde_json::json!({
                    "test_accuracy": summary,
                    "formatted": summary.percent(),
                    "per_seed": per_seed,
                });
                io::write_json(&out.join("results.json"), &v)?;
                v
            }
            Stage::DirectEval(s) => {
                let enc = self.checkpoint(&s.encoder)?;
                let records = read_probe_split(&self.dir(&s.data), &s.split)?;
                let (mut sentences, variant) = split_sentences(&records)?;
                if let Some(n) = s.sentences {
                    sentences.truncate(n);
                }
                let r = direct_eval_checkpoint(&enc, &sentences, variant)?;
                io::write_json(&out.join("results.json"), &r)?;
                serde_json::json!({ "mean": r.mean, "std": r.std, "formatted": r.summary(), "report": r })
            }
            Stage::Finetune(s) => {
                let enc = self.checkpoint(&s.encoder)?;
                let data = read_probe_data(&self.dir(&s.data))?;
                let mut fc = FinetuneConfig::desk(s.pooling, seed);
                fc.examples = s.examples;
                if let Some(v) = s.epochs {
                    fc.epochs = v;
                }
                if let Some(v) = s.batch_size {
                    fc.batch_size = v;
                }
                if let Some(v) = s.lr {
                    fc.lr = v;
                }
                let (tuned, head, report) = finetune_pair_classifier(&enc, &data.train, &fc)?;
                save_finetuned(&out.join(CHECKPOINT_DIR), &tuned, &head)?;
                serde_json::json!({
                    "examples": report.examples,
                    "steps": report.steps,
                    "epochs": report.epochs,
                    "params_digest": tuned.digest(),
                })
            }
            Stage::Opacity(s) => {
                let facts = read_facts(&s.facts)?;
                let inv = VerbInventory::default();
                let reg = TemplateRegistry::default();
                let g = Generator::new(&inv, &reg)?;
                let pairs = match s.shape {
                    Shape::Simple => g.generate_simple_pairs(&facts)?,
                    Shape::Coordinated => {
                        let n = s.n.ok_or_else(|| Error::config("coordinated pairs need a count"))?;
                        g.generate_coordinated_pairs(&facts, &mut rng::stream(seed, 0), n)?
                    }
                };
                let splits = split_dataset(&pairs, [8.0, 1.0, 1.0], seed);
                let m = write_splits(&splits, s.shape, seed, facts.len(), Some(io::file_digest(&s.facts)?), &out)?;
                io::write_jsonl(&out.join("all.jsonl"), &pairs)?;
                serde_json::json!({ "counts": m.counts, "equivalent": m.equivalent })
            }
            Stage::Similarity(s) => {
                let pairs: Vec<OpacityPair> = if s.pairs.ends_with(".jsonl") {
                    read_pairs(Path::new(&s.pairs))?
                } else {
                    read_pairs(&self.dir(&s.pairs).join("all.jsonl"))?
                };
                let table = EmbeddingTable::load(&s.embeddings)?;
                let r = similarity_report(&table, &pairs, &VerbInventory::default(), s.iterations, seed)?;
                io::write_json(&out.join("report.json"), &r)?;
                std::fs::write(out.join("report.txt"), r.table()).map_err(|e| Error::io(&out, e))?;
                serde_json::json!({
                    "statistic": r.permutation.observed_stat,
                    "permutation_p": r.permutation.p_two_sided,
                    "bootstrap_p": r.bootstrap.p_two_sided,
                })
            }
        })
    }
}

/// Runs every stage in order, stopping at the first failure. The manifest
/// is written to `<out_dir>/run_manifest.json` in both cases.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> std::result::Result<RunManifest, RunError> {
    cfg.validate().map_err(RunError::Validation)?;
    let root = opts
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    ensure_empty_or_force(&root, opts.force).map_err(RunError::Validation)?;
    io::create_dir(&root).map_err(RunError::Validation)?;
    let config_text = toml::to_string(cfg).map_err(|e| RunError::Validation(Error::config(e.to_string())))?;
    let started = Instant::now();
    let mut manifest = RunManifest {
        name: cfg.name.clone(),
        command_line: opts.command_line.clone(),
        config_file: opts.config_file.as_ref().map(|p| p.display().to_string()),
        config_digest: io::sha256_hex(config_text.as_bytes()),
        run_seed: cfg.seed,
        out_dir: root.display().to_string(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        wall_clock_seconds: 0.0,
        versions: BTreeMap::from([
            ("emulab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("manifest_format".to_string(), "1".to_string()),
        ]),
        valid: false,
        stages: cfg
            .stages
            .iter()
            .map(|s| StageRecord {
                name: s.name().to_string(),
                kind: s.kind(),
                status: StageStatus::NotRun,
                valid: false,
                seed: cfg.stage_seed(s),
                seconds: 0.0,
                inputs: Vec::new(),
                outputs: Vec::new(),
                metrics: serde_json::Value::Null,
                error: None,
            })
            .collect(),
    };
    let runner = Runner {
        root: root.clone(),
        verbose: opts.verbose,
    };
    let write = |m: &mut RunManifest| -> Result<()> {
        m.wall_clock_seconds = started.elapsed().as_secs_f64();
        io::write_json(&root.join(RUN_MANIFEST_FILE), m)
    };
    for (i, stage) in cfg.stages.iter().enumerate() {
        let seed = manifest.stages[i].seed;
        runner.log(&format!("[{}/{}] {} ({:?})", i + 1, cfg.stages.len(), stage.name(), stage.kind()));
        let t = Instant::now();
        let inputs: Result<Vec<FileDigest>> = stage
            .input_files()
            .into_iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.display().to_string(),
                    sha256: io::file_digest(p)?,
                })
            })
            .collect();
        let result = inputs.and_then(|inp| {
            manifest.stages[i].inputs = inp;
            runner.run_stage(stage, seed)
        });
        let rec = &mut manifest.stages[i];
        rec.seconds = t.elapsed().as_secs_f64();
        rec.outputs = digests_under(&root, &runner.dir(stage.name())).unwrap_or_default();
        match result {
            Ok(metrics) => {
                rec.status = StageStatus::Ok;
                rec.valid = true;
                rec.metrics = metrics;
            }
            Err(error) => {
                rec.status = StageStatus::Failed;
                rec.error = Some(error.to_string());
                let _ = write(&mut manifest);
                return Err(RunError::Stage {
                    stage: stage.name().to_string(),
                    error,
                    manifest: Box::new(manifest),
                });
            }
        }
        write(&mut manifest).map_err(|error| RunError::Stage {
            stage: stage.name().to_string(),
            error,
            manifest: Box::new(manifest.clone()),
        })?;
    }
    manifest.valid = true;
    write(&mut manifest).map_err(RunError::Validation)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Corpus,
    PairFile,
    ProbeDir,
    OpacityFile,
    OpacityDir,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetViolation {
    pub file: String,
    /// 1-based; absent for file-level problems.
    pub line: Option<usize>,
    pub check: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub path: String,
    pub kind: DatasetKind,
    pub records: usize,
    pub violations: Vec<DatasetViolation>,
}

impl DatasetReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, check: &str) -> usize {
        self.violations.iter().filter(|v| v.check == check).count()
    }
}

/// Settings used where a dataset carries no manifest.
#[derive(Clone, Copy, Debug, Default)]
pub struct ValidateOptions {
    pub variant: Option<Variant>,
    pub symmetry: Option<bool>,
    pub reflexivity: Option<bool>,
}

fn violation(file: &Path, line: Option<usize>, check: &str, detail: impl Into<String>) -> DatasetViolation {
    DatasetViolation {
        file: file.display().to_string(),
        line,
        check: check.to_string(),
        detail: detail.into(),
    }
}

fn validate_corpus(path: &Path, opts: ValidateOptions) -> Result<DatasetReport> {
    let lines = io::read_lines(path)?;
    let manifest: Option<CorpusManifest> = path
        .parent()
        .map(|d| d.join(MANIFEST_FILE))
        .filter(|m| m.exists())
        .and_then(|m| io::read_json(&m).ok());
    let variant = opts.variant.or(manifest.as_ref().map(|m| m.config.variant));
    let symmetry = opts.symmetry.or(manifest.as_ref().map(|m| m.config.symmetry)).unwrap_or(false);
    let reflexivity = opts
        .reflexivity
        .or(manifest.as_ref().map(|m| m.config.reflexivity))
        .unwrap_or(false);
    let tail = manifest.as_ref().map_or(0, |m| m.truncated_tail);
    let mut violations = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        match parse_sequence(line) {
            Ok((a, b)) => {
                if let Some(v) = variant {
                    let (va, vb) = (eval(&a, v), eval(&b, v));
                    if va != vb {
                        violations.push(violation(path, Some(i + 1), "denotation", format!("sides evaluate to {va} and {vb}")));
                    }
                }
            }
            Err(e) => violations.push(violation(path, Some(i + 1), "parse", e.to_string())),
        }
    }
    for c in closure_violations(&lines, symmetry, reflexivity, tail) {
        violations.push(violation(path, Some(c.line), "closure", format!("missing {}", c.missing)));
    }
    if let Some(m) = &manifest {
        if m.lines != lines.len() {
            violations.push(violation(
                path,
                None,
                "manifest",
                format!("manifest lists {} lines, file has {}", m.lines, lines.len()),
            ));
        }
    }
    Ok(DatasetReport {
        path: path.display().to_string(),
        kind: DatasetKind::Corpus,
        records: lines.len(),
        violations,
    })
}

enum PairLine {
    Logic(PairRecord),
    Opacity(OpacityPair),
}

fn validate_pair_file(path: &Path) -> Result<(DatasetReport, Vec<PairRecord>)> {
    let lines = io::read_lines(path)?;
    let mut violations = Vec::new();
    let mut logic = Vec::new();
    let mut opacity = 0;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<PairRecord>(line)
            .map(PairLine::Logic)
            .or_else(|_| serde_json::from_str::<OpacityPair>(line).map(PairLine::Opacity));
        match parsed {
            Ok(PairLine::Logic(r)) => {
                for p in r.check() {
                    violations.push(violation(path, Some(i + 1), "label", p));
                }
                logic.push(r);
            }
            Ok(PairLine::Opacity(p)) => {
                opacity += 1;
                let alternated: Vec<_> = p.clauses.iter().filter(|c| c.alternated).collect();
                if alternated.len() != 1 {
                    violations.push(violation(path, Some(i + 1), "label", "expected one alternated clause"));
                } else if alternated[0].class.label() != p.label {
                    violations.push(violation(path, Some(i + 1), "label", "label disagrees with alternation site"));
                }
            }
            Err(e) => violations.push(violation(path, Some(i + 1), "parse", e.to_string())),
        }
    }
    let kind = if opacity > 0 && logic.is_empty() {
        DatasetKind::OpacityFile
    } else {
        DatasetKind::PairFile
    };
    Ok((
        DatasetReport {
            path: path.display().to_string(),
            kind,
            records: logic.len() + opacity,
            violations,
        },
        logic,
    ))
}

/// Runs the validators that apply to `path`: a corpus file (`.txt`), a
/// pair file (`.jsonl`), or a directory holding either.
pub fn validate_dataset(path: &Path, opts: ValidateOptions) -> Result<DatasetReport> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    if path.is_dir() {
        if path.join(CORPUS_FILE).exists() {
            return validate_corpus(&path.join(CORPUS_FILE), opts);
        }
        let mut report = DatasetReport {
            path: path.display().to_string(),
            kind: DatasetKind::ProbeDir,
            records: 0,
            violations: Vec::new(),
        };
        let mut data = ProbeData::default();
        let mut any = false;
        for name in ["train", "valid", "test"] {
            let f = path.join(format!("{name}.jsonl"));
            if !f.exists() {
                continue;
            }
            any = true;
            let (r, logic) = validate_pair_file(&f)?;
            if r.kind == DatasetKind::OpacityFile {
                report.kind = DatasetKind::OpacityDir;
            }
            report.records += r.records;
            report.violations.extend(r.violations);
            match name {
                "train" => data.train = logic,
                "valid" => data.valid = logic,
                _ => data.test = logic,
            }
        }
        if !any {
            return Err(Error::config(format!("{} holds no recognised dataset", path.display())));
        }
        if report.kind == DatasetKind::ProbeDir {
            for v in disjointness_violations(&data, &HashSet::new()) {
                report.violations.push(violation(path, None, "disjointness", v));
            }
        }
        return Ok(report);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => Ok(validate_pair_file(path)?.0),
        _ => validate_corpus(path, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
name = "smoke"
seed = 7

[[stages]]
kind = "corpus"
name = "corpus"
variant = "lt"
n_sequences = 400
reflexivity = true
symmetry = true
per_sentence_cap = 16

[[stages]]
kind = "probe_data"
name = "probe"
variant = "lt"
train_pairs = 40
valid_pairs = 10
test_pairs = 10
max_sentence_tokens = 16
exclude = "corpus"

[[stages]]
kind = "pretrain"
name = "alm"
corpus = "corpus"
arch = "alm"
model = { preset = "tiny", max_positions = 40 }
train = { steps = 3, batch_size = 4, warmup_steps = 1 }

[[stages]]
kind = "probe"
name = "probe_alm"
encoder = "alm"
data = "probe"
pooling = "minus-attn"
seeds = [0, 1]
epochs = 1

[[stages]]
kind = "direct_eval"
name = "direct"
encoder = "alm"
data = "probe"
"#;

    #[test]
    fn config_errors_name_fields() {
        let e = parse_config("name = \"x\"\nstages = []\n").unwrap();
        assert!(e.validate().unwrap_err().to_string().contains("stages"));
        let bad = "name = \"x\"\n[[stages]]\nkind = \"corpus\"\nname = \"c\"\nvariant = \"lt\"\nn_sequences = \"many\"\n";
        let msg = parse_config(bad).unwrap_err().to_string();
        assert!(msg.contains("stages[0].n_sequences"), "{msg}");
        let dangling = "name = \"x\"\n[[stages]]\nkind = \"pretrain\"\nname = \"p\"\ncorpus = \"nope\"\narch = \"alm\"\n";
        assert!(parse_config(dangling).unwrap().validate().is_err());
    }

    #[test]
    fn smoke_run_is_reproducible() {
        let cfg = parse_config(SMOKE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = |sub: &str| RunOptions {
            out_dir: Some(dir.path().join(sub)),
            ..RunOptions::default()
        };
        let a = run_experiment(&cfg, &opts("a")).unwrap();
        let b = run_experiment(&cfg, &opts("b")).unwrap();
        assert!(a.valid);
        assert_eq!(a.output_digests(), b.output_digests());
        assert!(a.stages.iter().all(|s| s.status == StageStatus::Ok));
        assert!(matches!(run_experiment(&cfg, &opts("a")), Err(RunError::Validation(_))));
        let forced = RunOptions {
            force: true,
            ..opts("a")
        };
        assert!(run_experiment(&cfg, &forced).is_ok());
        let report = validate_dataset(&dir.path().join("a/corpus"), ValidateOptions::default()).unwrap();
        assert!(report.is_clean(), "{:?}", report.violations);
        let report = validate_dataset(&dir.path().join("a/probe"), ValidateOptions::default()).unwrap();
        assert!(report.is_clean(), "{:?}", report.violations);
    }

    #[test]
    fn stage_failure_marks_manifest() {
        let mut cfg = parse_config(SMOKE).unwrap();
        cfg.stages.truncate(3);
        if let Stage::Pretrain(p) = &mut cfg.stages[2] {
            p.model.max_positions = Some(10);
        }
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().join("run")),
            ..RunOptions::default()
        };
        let err = run_experiment(&cfg, &opts).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let m: RunManifest = io::read_json(&dir.path().join("run").join(RUN_MANIFEST_FILE)).unwrap();
        assert!(!m.valid);
        assert_eq!(m.stage("alm").unwrap().status, StageStatus::Failed);
        assert!(m.stage("corpus").unwrap().valid);
    }

    #[test]
    fn corrupt_corpus_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        std::fs::write(&f, "(T&T)=(T|F)\n(T=\n(T&F)=(T|T)\n").unwrap();
        let opts = ValidateOptions {
            variant: Some(Variant::Lt),
            ..ValidateOptions::default()
        };
        let r = validate_dataset(&f, opts).unwrap();
        assert_eq!(r.count("parse"), 1);
        assert_eq!(r.violations.iter().find(|v| v.check == "parse").unwrap().line, Some(2));
        assert_eq!(r.count("denotation"), 1);
    }

    #[test]
    fn missing_mirror_is_one_closure_violation() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        std::fs::write(&f, "(T&T)=(T|F)\n(T|F)=(T&T)\n(F&T)=(F|F)\n").unwrap();
        let opts = ValidateOptions {
            variant: Some(Variant::Lt),
            symmetry: Some(true),
            reflexivity: Some(false),
        };
        let r = validate_dataset(&f, opts).unwrap();
        assert_eq!(r.count("closure"), 1);
        assert_eq!(r.violations.len(), 1);
    }
}
