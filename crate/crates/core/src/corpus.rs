//! Pretraining corpora of `a=b` sequences and labeled probe datasets.
//!
//! Base sentences are drawn without replacement: a sentence string is used at
//! most once as a base sentence across the whole corpus, and probe splits
//! never reuse a sentence from another split or from a referenced corpus.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{parse, tokenize, Pcfg, Sampler, SynTree, Token, Variant, DEFAULT_MAX_TOKENS};
use crate::io;
use crate::rng;
use crate::semantics::{eval, TruthValue};

/// Smallest admissible `a=b`: two 4-token sentences and the `=`.
pub const MIN_SEQUENCE_TOKENS: usize = 9;

const NOVEL_ATTEMPTS: usize = 200_000;
const PAIR_ATTEMPTS: usize = 100;
const PARTNER_ATTEMPTS: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub variant: Variant,
    pub n_sequences: usize,
    #[serde(default = "default_max_sequence_tokens")]
    pub max_sequence_tokens: usize,
    #[serde(default)]
    pub reflexivity: bool,
    #[serde(default)]
    pub symmetry: bool,
    pub seed: u64,
    #[serde(default)]
    pub per_sentence_cap: Option<usize>,
}

fn default_max_sequence_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

impl CorpusConfig {
    pub fn new(variant: Variant, n_sequences: usize, seed: u64) -> Self {
        CorpusConfig {
            variant,
            n_sequences,
            max_sequence_tokens: DEFAULT_MAX_TOKENS,
            reflexivity: false,
            symmetry: false,
            seed,
            per_sentence_cap: None,
        }
    }

    pub fn with_closure(mut self, reflexivity: bool, symmetry: bool) -> Self {
        self.reflexivity = reflexivity;
        self.symmetry = symmetry;
        self
    }

    pub fn with_sentence_cap(mut self, cap: usize) -> Self {
        self.per_sentence_cap = Some(cap);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sequences == 0 {
            return Err(Error::config("n_sequences must be at least 1"));
        }
        if self.max_sequence_tokens < MIN_SEQUENCE_TOKENS {
            return Err(Error::config(format!(
                "max_sequence_tokens must be at least {MIN_SEQUENCE_TOKENS}"
            )));
        }
        if let Some(cap) = self.per_sentence_cap {
            if cap < 4 {
                return Err(Error::config("per_sentence_cap must be at least 4"));
            }
        }
        Ok(())
    }

    /// Lines emitted per base pair.
    pub fn group_size(&self) -> usize {
        1 + usize::from(self.symmetry) + 2 * usize::from(self.reflexivity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Equivalent,
    NonEquivalent,
}

impl PairLabel {
    pub fn from_equal(equal: bool) -> Self {
        if equal {
            PairLabel::Equivalent
        } else {
            PairLabel::NonEquivalent
        }
    }

    pub fn is_equivalent(self) -> bool {
        self == PairLabel::Equivalent
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairLabel::Equivalent => "equivalent",
            PairLabel::NonEquivalent => "non_equivalent",
        }
    }
}

impl fmt::Display for PairLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equivalent" => Ok(PairLabel::Equivalent),
            "non_equivalent" => Ok(PairLabel::NonEquivalent),
            other => Err(Error::config(format!("unknown label {other:?}"))),
        }
    }
}

/// Anything with two sentences and an equivalence label.
pub trait LabeledPair {
    fn sentence_a(&self) -> &str;
    fn sentence_b(&self) -> &str;
    fn label(&self) -> PairLabel;
}

/// A labeled sentence pair; the field order is the on-disk key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub a: String,
    pub b: String,
    pub label: PairLabel,
    pub denot_a: TruthValue,
    pub denot_b: TruthValue,
    pub variant: Variant,
}

impl PairRecord {
    pub fn new(a: &SynTree, b: &SynTree, variant: Variant) -> Self {
        let (da, db) = (eval(a, variant), eval(b, variant));
        PairRecord {
            a: a.surface(),
            b: b.surface(),
            label: PairLabel::from_equal(da == db),
            denot_a: da,
            denot_b: db,
            variant,
        }
    }

    /// Problems with this record, recomputing denotations from the sentences.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut value = |s: &str, stored: TruthValue, side: &str| match parse_sentence(s) {
            Ok(tree) => {
                let v = eval(&tree, self.variant);
                if v != stored {
                    problems.push(format!("denot_{side} is {stored} but {s} evaluates to {v}"));
                }
                Some(v)
            }
            Err(e) => {
                problems.push(format!("sentence {side}: {e}"));
                None
            }
        };
        let da = value(&self.a, self.denot_a, "a");
        let db = value(&self.b, self.denot_b, "b");
        if PairLabel::from_equal(self.denot_a == self.denot_b) != self.label {
            problems.push(format!("label {} disagrees with stored denotations", self.label));
        }
        if let (Some(da), Some(db)) = (da, db) {
            if PairLabel::from_equal(da == db) != self.label {
                problems.push(format!("label {} disagrees with the oracle", self.label));
            }
        }
        problems
    }
}

impl LabeledPair for PairRecord {
    fn sentence_a(&self) -> &str {
        &self.a
    }

    fn sentence_b(&self) -> &str {
        &self.b
    }

    fn label(&self) -> PairLabel {
        self.label
    }
}

pub fn parse_sentence(s: &str) -> Result<SynTree> {
    Ok(parse(&tokenize(s)?)?)
}

/// Splits a pretraining line `a=b` and parses both sides.
pub fn parse_sequence(line: &str) -> Result<(SynTree, SynTree)> {
    let tokens = tokenize(line)?;
    let eqs: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == Token::Eq)
        .map(|(i, _)| i)
        .collect();
    let &[at] = eqs.as_slice() else {
        return Err(Error::config(format!(
            "expected exactly one '=' in {line:?}, found {}",
            eqs.len()
        )));
    };
    let a = parse(&tokens[..at])?;
    let b = parse(&tokens[at + 1..]).map_err(|mut e| {
        e.index += at + 1;
        e
    })?;
    Ok((a, b))
}

/// Draws sentences that have not been handed out before.
struct NovelSampler<'a> {
    pcfg: &'a Pcfg,
    seen: &'a mut HashSet<String>,
}

impl NovelSampler<'_> {
    fn draw<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        max_tokens: usize,
        accept: impl FnMut(&SynTree) -> bool,
    ) -> Result<(SynTree, String)> {
        self.draw_within(rng, max_tokens, NOVEL_ATTEMPTS, accept)
    }

    fn draw_within<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        max_tokens: usize,
        attempts: usize,
        mut accept: impl FnMut(&SynTree) -> bool,
    ) -> Result<(SynTree, String)> {
        let sampler = Sampler::new(self.pcfg, max_tokens)?;
        for _ in 0..attempts {
            let tree = sampler.sample(rng)?;
            let s = tree.surface();
            if !self.seen.contains(&s) && accept(&tree) {
                self.seen.insert(s.clone());
                return Ok((tree, s));
            }
        }
        Err(Error::RejectionBudget {
            attempts,
            what: format!("novel sentence of at most {max_tokens} tokens"),
        })
    }
}

fn pair_caps(budget_tokens: usize, cap: Option<usize>) -> Result<usize> {
    if budget_tokens < MIN_SEQUENCE_TOKENS {
        return Err(Error::config(format!(
            "sequence budget must be at least {MIN_SEQUENCE_TOKENS}, got {budget_tokens}"
        )));
    }
    Ok(cap.unwrap_or(usize::MAX).min(budget_tokens - 5))
}

fn equal_pair_from<R: Rng + ?Sized>(
    novel: &mut NovelSampler<'_>,
    variant: Variant,
    rng: &mut R,
    budget_tokens: usize,
    cap: Option<usize>,
) -> Result<(SynTree, SynTree)> {
    let first_cap = pair_caps(budget_tokens, cap)?;
    // A long first sentence can leave room only for short partners, which
    // run out once drawn; such a sentence is dropped and the pair redrawn.
    let mut last = None;
    for _ in 0..PAIR_ATTEMPTS {
        let (a, _) = novel.draw(rng, first_cap, |_| true)?;
        let target = eval(&a, variant);
        let second_cap = cap
            .unwrap_or(usize::MAX)
            .min(budget_tokens - 1 - a.token_len());
        match novel.draw_within(rng, second_cap, PARTNER_ATTEMPTS, |b| eval(b, variant) == target) {
            Ok((b, _)) => return Ok((a, b)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Two independently sampled, distinct sentences with equal denotation whose
/// `a=b` sequence fits in `budget_tokens`.
pub fn sample_equal_pair<R: Rng + ?Sized>(
    pcfg: &Pcfg,
    variant: Variant,
    rng: &mut R,
    budget_tokens: usize,
) -> Result<(SynTree, SynTree)> {
    let mut seen = HashSet::new();
    let mut novel = NovelSampler { pcfg, seen: &mut seen };
    equal_pair_from(&mut novel, variant, rng, budget_tokens, None)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationCounts {
    pub base: usize,
    pub symmetric: usize,
    pub reflexive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub seed: u64,
    pub file: String,
    pub lines: usize,
    pub base_pairs: usize,
    pub counts: AugmentationCounts,
    /// Lines of a final group cut short to hit `n_sequences` exactly.
    pub truncated_tail: usize,
    pub distinct_sentences: usize,
    pub mean_sentence_tokens: f64,
    pub digest: String,
}

/// An in-memory corpus before it is written out.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub lines: Vec<String>,
    pub counts: AugmentationCounts,
    pub base_pairs: usize,
    pub truncated_tail: usize,
    /// Every base sentence, in generation order.
    pub sentences: Vec<String>,
}

impl Corpus {
    pub fn sentence_set(&self) -> HashSet<String> {
        self.sentences.iter().cloned().collect()
    }

    pub fn mean_sentence_tokens(&self) -> f64 {
        let total: usize = self.sentences.iter().map(String::len).sum();
        total as f64 / self.sentences.len().max(1) as f64
    }
}

/// Generates the corpus in memory. Each base pair `(a, b)` emits `a=b`, then
/// `b=a` under symmetry, then `a=a` and `b=b` under reflexivity; all lines
/// count toward `n_sequences` and the last group may be cut short.
pub fn generate_pretraining_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let pcfg = Pcfg::default_for(config.variant);
    let mut rng = rng::stream(config.seed, 0);
    let mut seen = HashSet::new();
    let mut novel = NovelSampler {
        pcfg: &pcfg,
        seen: &mut seen,
    };
    let mut lines = Vec::with_capacity(config.n_sequences);
    let mut sentences = Vec::new();
    let mut counts = AugmentationCounts::default();
    let mut base_pairs = 0;
    let mut truncated_tail = 0;
    while lines.len() < config.n_sequences {
        let (a, b) = equal_pair_from(
            &mut novel,
            config.variant,
            &mut rng,
            config.max_sequence_tokens,
            config.per_sentence_cap,
        )?;
        let (a, b) = (a.surface(), b.surface());
        base_pairs += 1;
        let mut group = vec![(format!("{a}={b}"), 0usize)];
        if config.symmetry {
            group.push((format!("{b}={a}"), 1));
        }
        if config.reflexivity {
            group.push((format!("{a}={a}"), 2));
            group.push((format!("{b}={b}"), 2));
        }
        let room = config.n_sequences - lines.len();
        if group.len() > room {
            truncated_tail = room;
            group.truncate(room);
        }
        for (line, kind) in group {
            match kind {
                0 => counts.base += 1,
                1 => counts.symmetric += 1,
                _ => counts.reflexive += 1,
            }
            lines.push(line);
        }
        sentences.push(a);
        sentences.push(b);
    }
    Ok(Corpus {
        config: config.clone(),
        lines,
        counts,
        base_pairs,
        truncated_tail,
        sentences,
    })
}

pub const CORPUS_FILE: &str = "corpus.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `corpus.txt` and `manifest.json` into `out_dir`.
pub fn build_pretraining_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    let corpus = generate_pretraining_corpus(config)?;
    write_corpus(&corpus, out_dir)
}

pub fn write_corpus(corpus: &Corpus, out_dir: &Path) -> Result<CorpusManifest> {
    io::create_dir(out_dir)?;
    let path = out_dir.join(CORPUS_FILE);
    io::write_lines(&path, &corpus.lines)?;
    let manifest = CorpusManifest {
        config: corpus.config.clone(),
        seed: corpus.config.seed,
        file: CORPUS_FILE.to_string(),
        lines: corpus.lines.len(),
        base_pairs: corpus.base_pairs,
        counts: corpus.counts.clone(),
        truncated_tail: corpus.truncated_tail,
        distinct_sentences: corpus.sentences.len(),
        mean_sentence_tokens: corpus.mean_sentence_tokens(),
        digest: io::file_digest(&path)?,
    };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Sentences appearing on either side of any line of a corpus file.
pub fn corpus_sentences(path: &Path) -> Result<HashSet<String>> {
    let mut out = HashSet::new();
    for line in io::read_lines(path)? {
        for side in line.split('=') {
            if !side.is_empty() {
                out.insert(side.to_string());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
}

impl SplitSpec {
    pub fn new(train_pairs: usize, valid_pairs: usize, test_pairs: usize) -> Self {
        SplitSpec {
            train_pairs,
            valid_pairs,
            test_pairs,
        }
    }

    pub fn named(&self) -> [(&'static str, usize); 3] {
        [
            ("train", self.train_pairs),
            ("valid", self.valid_pairs),
            ("test", self.test_pairs),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeDataConfig {
    pub variant: Variant,
    pub seed: u64,
    #[serde(default = "default_max_sequence_tokens")]
    pub max_sentence_tokens: usize,
}

impl ProbeDataConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        ProbeDataConfig {
            variant,
            seed,
            max_sentence_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_sentence_cap(mut self, cap: usize) -> Self {
        self.max_sentence_tokens = cap;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub file: String,
    pub pairs: usize,
    pub sentences: usize,
    pub equivalent: usize,
    pub non_equivalent: usize,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeManifest {
    pub config: ProbeDataConfig,
    pub split: SplitSpec,
    pub splits: BTreeMap<String, SplitSummary>,
    pub excluded_sentences: usize,
    pub excluded_corpus_digest: Option<String>,
    pub disjoint: bool,
}

/// In-memory probe splits.
#[derive(Clone, Debug, Default)]
pub struct ProbeData {
    pub train: Vec<PairRecord>,
    pub valid: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

impl ProbeData {
    pub fn split(&self, name: &str) -> Option<&[PairRecord]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Samples a pool of novel sentences per split, then draws label-balanced
/// pairs from the pool. Pool size equals the requested pair count (at least
/// four); equivalent pairs take `ceil(n/2)`.
pub fn generate_probe_data(
    config: &ProbeDataConfig,
    split: SplitSpec,
    exclude: &HashSet<String>,
) -> Result<ProbeData> {
    let pcfg = Pcfg::default_for(config.variant);
    let mut seen = exclude.clone();
    let mut data = ProbeData::default();
    for (index, (name, n_pairs)) in split.named().into_iter().enumerate() {
        let mut rng = rng::stream(config.seed, index as u64);
        let records = sample_split(&pcfg, config, n_pairs, &mut seen, &mut rng)
            .map_err(|e| Error::Infeasible(format!("{name} split: {e}")))?;
        match name {
            "train" => data.train = records,
            "valid" => data.valid = records,
            _ => data.test = records,
        }
    }
    Ok(data)
}

fn sample_split<R: Rng + ?Sized>(
    pcfg: &Pcfg,
    config: &ProbeDataConfig,
    n_pairs: usize,
    seen: &mut HashSet<String>,
    rng: &mut R,
) -> Result<Vec<PairRecord>> {
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    let mut novel = NovelSampler { pcfg, seen };
    let pool: Vec<SynTree> = (0..n_pairs.max(4))
        .map(|_| novel.draw(rng, config.max_sentence_tokens, |_| true).map(|(t, _)| t))
        .collect::<Result<_>>()?;
    let values: Vec<TruthValue> = pool.iter().map(|t| eval(t, config.variant)).collect();
    let mut quota = [n_pairs.div_ceil(2), n_pairs / 2];
    let mut used = HashSet::new();
    let mut records = Vec::with_capacity(n_pairs);
    let max_attempts = 1000 * n_pairs + 10_000;
    for _ in 0..max_attempts {
        if records.len() == n_pairs {
            break;
        }
        let i = rng.random_range(0..pool.len());
        let j = rng.random_range(0..pool.len());
        if i == j || used.contains(&(i, j)) {
            continue;
        }
        let slot = usize::from(values[i] != values[j]);
        if quota[slot] == 0 {
            continue;
        }
        quota[slot] -= 1;
        used.insert((i, j));
        records.push(PairRecord::new(&pool[i], &pool[j], config.variant));
    }
    if records.len() < n_pairs {
        return Err(Error::Infeasible(format!(
            "could only form {} of {n_pairs} balanced pairs from {} sentences",
            records.len(),
            pool.len()
        )));
    }
    Ok(records)
}

pub fn split_file(name: &str) -> String {
    format!("{name}.jsonl")
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `manifest.json`.
/// When `exclude_corpus` is given, its sentences are kept out of every split.
pub fn build_probe_dataset(
    config: &ProbeDataConfig,
    split: SplitSpec,
    out_dir: &Path,
    exclude_corpus: Option<&Path>,
) -> Result<ProbeManifest> {
    let (exclude, digest) = match exclude_corpus {
        Some(path) => (corpus_sentences(path)?, Some(io::file_digest(path)?)),
        None => (HashSet::new(), None),
    };
    let data = generate_probe_data(config, split, &exclude)?;
    write_probe_data(config, split, &data, out_dir, exclude.len(), digest, &exclude)
}

pub fn write_probe_data(
    config: &ProbeDataConfig,
    split: SplitSpec,
    data: &ProbeData,
    out_dir: &Path,
    excluded_sentences: usize,
    excluded_corpus_digest: Option<String>,
    exclude: &HashSet<String>,
) -> Result<ProbeManifest> {
    io::create_dir(out_dir)?;
    let mut splits = BTreeMap::new();
    for (name, _) in split.named() {
        let records = data.split(name).expect("known split");
        let file = split_file(name);
        let path = out_dir.join(&file);
        io::write_jsonl(&path, records)?;
        let sentences: HashSet<&str> = records.iter().flat_map(|r| [r.a.as_str(), r.b.as_str()]).collect();
        let equivalent = records.iter().filter(|r| r.label.is_equivalent()).count();
        splits.insert(
            name.to_string(),
            SplitSummary {
                file,
                pairs: records.len(),
                sentences: sentences.len(),
                equivalent,
                non_equivalent: records.len() - equivalent,
                digest: io::file_digest(&path)?,
            },
        );
    }
    let manifest = ProbeManifest {
        config: config.clone(),
        split,
        splits,
        excluded_sentences,
        excluded_corpus_digest,
        disjoint: disjointness_violations(data, exclude).is_empty(),
    };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_probe_split(dir: &Path, name: &str) -> Result<Vec<PairRecord>> {
    io::read_jsonl(&dir.join(split_file(name)))
}

pub fn read_probe_data(dir: &Path) -> Result<ProbeData> {
    Ok(ProbeData {
        train: read_probe_split(dir, "train")?,
        valid: read_probe_split(dir, "valid")?,
        test: read_probe_split(dir, "test")?,
    })
}

/// Sentences shared between splits, or between a split and `exclude`.
pub fn disjointness_violations(data: &ProbeData, exclude: &HashSet<String>) -> Vec<String> {
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    let mut out = Vec::new();
    for name in ["train", "valid", "test"] {
        let mut here = HashSet::new();
        for r in data.split(name).expect("known split") {
            for s in [r.a.as_str(), r.b.as_str()] {
                if !here.insert(s) {
                    continue;
                }
                if exclude.contains(s) {
                    out.push(format!("{s} in {name} also appears in the pretraining corpus"));
                }
                if let Some(prev) = owner.insert(s, name) {
                    out.push(format!("{s} appears in both {prev} and {name}"));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosureViolation {
    /// 1-based line number of the line whose closure partner is missing.
    pub line: usize,
    pub missing: String,
}

/// Checks symmetry (`b=a` for every `a=b`) and reflexivity (`a=a` and `b=b`)
/// on every line except the final `exempt_tail` lines.
pub fn closure_violations(
    lines: &[String],
    symmetry: bool,
    reflexivity: bool,
    exempt_tail: usize,
) -> Vec<ClosureViolation> {
    let present: HashSet<&str> = lines.iter().map(String::as_str).collect();
    let checked = lines.len().saturating_sub(exempt_tail);
    let mut out = Vec::new();
    for (i, line) in lines[..checked].iter().enumerate() {
        let Some((a, b)) = line.split_once('=') else {
            continue;
        };
        let mut need = Vec::new();
        if symmetry {
            need.push(format!("{b}={a}"));
        }
        if reflexivity {
            need.push(format!("{a}={a}"));
            need.push(format!("{b}={b}"));
        }
        for n in need {
            if !present.contains(n.as_str()) {
                out.push(ClosureViolation {
                    line: i + 1,
                    missing: n,
                });
            }
        }
    }
    out
}

pub fn corpus_path(dir: &Path) -> PathBuf {
    dir.join(CORPUS_FILE)
}
