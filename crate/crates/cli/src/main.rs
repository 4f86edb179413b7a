use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emulab::corpus::{build_pretraining_corpus, build_probe_dataset, read_probe_split, CorpusConfig, ProbeDataConfig, SplitSpec};
use emulab::directeval::direct_eval_checkpoint;
use emulab::experiment::{
    ensure_empty_or_force, load_config, run_experiment, split_sentences, validate_dataset, ModelSpec, RunOptions,
    TrainSpec, ValidateOptions,
};
use emulab::grammar::{parse_str, Pcfg, Sampler, Variant, DEFAULT_MAX_TOKENS};
use emulab::neural::{train_alm, train_mlm, Arch, Checkpoint};
use emulab::opacity::{read_facts, read_pairs, split_dataset, write_splits, Generator, Shape, TemplateRegistry, VerbInventory};
use emulab::probe::{eval_probe, train_probe_on_bank, FeatureBank, MeanStd, Pooling, ProbeConfig, SavedProbe};
use emulab::semantics::{assertion_oracle, denotations, eval, mark_binders, transparency_check};
use emulab::stats::{similarity_report, EmbeddingTable};
use emulab::{io, rng, Error};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "emulab", version, about = "Logic-language corpora, desk-scale language models and probes")]
struct Cli {
    /// Worker threads for stages that can use them.
    #[arg(long, global = true, env = "EMULAB_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Root that relative output paths are resolved against.
    #[arg(long, global = true, env = "EMULAB_OUT_ROOT")]
    out_root: Option<PathBuf>,
    /// Overwrite non-empty output paths.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grammar utilities.
    #[command(subcommand)]
    Grammar(GrammarCmd),
    /// Truth-value oracle.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Count subexpressions whose value depends on their context.
    Transparency(TransparencyArgs),
    /// Pretraining corpora and probe datasets.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train a language model on a corpus.
    Pretrain(PretrainArgs),
    /// Bilinear equivalence probes.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Template-based evaluation without any probe.
    DirectEval(DirectEvalArgs),
    /// Natural-language opacity pairs.
    #[command(subcommand)]
    Opacity(OpacityCmd),
    /// Cosine similarity of pairs by verb, with significance tests.
    Similarity(SimilarityArgs),
    /// Check a dataset file or directory.
    Validate(ValidateArgs),
    /// Run an experiment config.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum GrammarCmd {
    /// Print sampled sentences, one per line.
    Sample {
        #[arg(long, default_value = "lt")]
        variant: Variant,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
        max_tokens: usize,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Print 1 if the two sentences have the same value, else 0.
    Check {
        a: String,
        b: String,
        #[arg(long, default_value = "lt")]
        variant: Variant,
        /// Also print every node's value and the active binders.
        #[arg(long)]
        annotate: bool,
    },
}

#[derive(Args)]
struct TransparencyArgs {
    #[arg(long)]
    variant: Variant,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Generate a pretraining corpus of `a=b` lines.
    Build {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reflexivity: bool,
        #[arg(long)]
        symmetry: bool,
        /// Per-sentence token cap.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate balanced train/valid/test probe pairs.
    ProbeSplit {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        valid: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        cap: Option<usize>,
        /// Corpus file whose sentences must not appear in the pairs.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PretrainFile {
    #[serde(default)]
    model: ModelSpec,
    #[serde(default)]
    train: TrainSpec,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    arch: Arch,
    #[arg(long)]
    corpus: PathBuf,
    /// TOML with optional [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Breakdown {
    None,
    Label,
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Train probes on a frozen encoder, one per seed.
    Train {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "minus-attn")]
        rep: Pooling,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Use the full-scale probe settings instead of the desk ones.
        #[arg(long)]
        reference: bool,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate saved probes on a pair file.
    Eval {
        #[arg(long)]
        encoder: PathBuf,
        /// A probe directory, or a directory of `seed_*` probe directories.
        #[arg(long)]
        probe: PathBuf,
        /// A pair file, or a dataset directory (its test split is used).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Breakdown::None)]
        breakdown: Breakdown,
    },
}

#[derive(Args)]
struct DirectEvalArgs {
    #[arg(long)]
    encoder: PathBuf,
    /// Probe dataset directory or pair file supplying the sentences.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OpacityCmd {
    /// Generate pairs from a facts file and split them 8/1/1.
    Build {
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        shape: Shape,
        /// Number of coordinated pairs.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimilarityArgs {
    /// Embedding table file, or a directory holding `embeddings.jsonl`.
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ValidateArgs {
    path: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    symmetry: Option<bool>,
    #[arg(long)]
    reflexivity: Option<bool>,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

enum Failure {
    Validation(String),
    Stage(String),
    /// Stdout was closed by the reader, as with `| head`.
    Closed,
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            Failure::Closed
        } else {
            Failure::Stage(e.to_string())
        }
    }
}

macro_rules! out {
    ($($arg:tt)*) => {
        write!(std::io::stdout(), $($arg)*)?
    };
}

macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse(_) | Error::UnknownSymbol(_) | Error::InvalidGrammar(_) | Error::Format { .. } => {
                Failure::Validation(e.to_string())
            }
            other => Failure::Stage(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    out_root: Option<PathBuf>,
    force: bool,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Output directory, checked against silent overwrites.
    fn out_dir(&self, p: &Path) -> Result<PathBuf, Failure> {
        let d = self.out(p);
        ensure_empty_or_force(&d, self.force)?;
        Ok(d)
    }

    fn out_file(&self, p: &Path) -> Result<PathBuf, Failure> {
        let f = self.out(p);
        if f.exists() && !self.force {
            return Err(Failure::Validation(format!(
                "{} exists; pass --force to overwrite",
                f.display()
            )));
        }
        if let Some(parent) = f.parent().filter(|p| !p.as_os_str().is_empty()) {
            io::create_dir(parent)?;
        }
        Ok(f)
    }
}

fn print_json<T: Serialize>(v: &T) -> CmdResult {
    outln!("{}", serde_json::to_string_pretty(v).map_err(Error::from)?);
    Ok(())
}

fn probe_dirs(p: &Path) -> Result<Vec<PathBuf>, Failure> {
    if p.join(emulab::probe::PROBE_FILE).exists() || p.is_file() {
        return Ok(vec![p.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(p)
        .map_err(|e| Error::io(p, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|d| d.join(emulab::probe::PROBE_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::Validation(format!("no probes under {}", p.display())));
    }
    Ok(dirs)
}

fn pair_file(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.jsonl"))
    } else {
        data.to_path_buf()
    }
}

fn run(cli: Cli) -> CmdResult {
    let ctx = Ctx {
        out_root: cli.out_root,
        force: cli.force,
    };
    if cli.workers == 0 {
        return Err(Failure::Validation("--workers must be at least 1".into()));
    }
    match cli.command {
        Command::Grammar(GrammarCmd::Sample {
            variant,
            n,
            seed,
            max_tokens,
        }) => {
            let pcfg = Pcfg::default_for(variant);
            let sampler = Sampler::new(&pcfg, max_tokens)?;
            let mut r = rng::seeded(seed);
            for _ in 0..n {
                outln!("{}", sampler.sample(&mut r)?.surface());
            }
        }
        Command::Oracle(OracleCmd::Check { a, b, variant, annotate }) => {
            let (ta, tb) = (parse_str(&a)?, parse_str(&b)?);
            outln!("{}", u8::from(assertion_oracle(&ta, &tb, variant)));
            if annotate {
                for (label, t) in [("a", &ta), ("b", &tb)] {
                    let d = denotations(t, variant);
                    outln!("{label} = {}", eval(t, variant));
                    for id in t.ids() {
                        if let Some(v) = d.get(id) {
                            outln!("  {id}\t{}\t{v}", t.subtree(id)?.surface());
                        }
                    }
                    if variant == Variant::Ln {
                        for binder in mark_binders(t).effective_binders() {
                            outln!("  binder {binder:?}");
                        }
                    }
                }
            }
        }
        Command::Transparency(a) => {
            let pcfg = Pcfg::default_for(a.variant);
            let report = transparency_check(a.variant, &pcfg, a.n, a.max_tokens, &mut rng::seeded(a.seed))?;
            outln!(
                "{} sentences, {} subexpressions, {} violations",
                report.sentences_checked,
                report.nodes_checked,
                report.violations.len()
            );
            if let Some(p) = a.report {
                io::write_json(&ctx.out_file(&p)?, &report)?;
            }
        }
        Command::Corpus(CorpusCmd::Build {
            variant,
            n,
            seed,
            reflexivity,
            symmetry,
            cap,
            out,
        }) => {
            let mut c = CorpusConfig::new(variant, n, seed).with_closure(reflexivity, symmetry);
            if let Some(cap) = cap {
                c = c.with_sentence_cap(cap);
            }
            let m = build_pretraining_corpus(&c, &ctx.out_dir(&out)?)?;
            print_json(&m)?;
        }
        Command::Corpus(CorpusCmd::ProbeSplit {
            variant,
            train,
            valid,
            test,
            seed,
            cap,
            exclude,
            out,
        }) => {
            let mut c = ProbeDataConfig::new(variant, seed);
            if let Some(cap) = cap {
                c = c.with_sentence_cap(cap);
            }
            let m = build_probe_dataset(&c, SplitSpec::new(train, valid, test), &ctx.out_dir(&out)?, exclude.as_deref())?;
            print_json(&m)?;
        }
        Command::Pretrain(a) => {
            let file: PretrainFile = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_path_to_error::deserialize(toml::Deserializer::new(&text))
                        .map_err(|e| Failure::Validation(format!("{}: at `{}`: {}", p.display(), e.path(), e.inner())))?
                }
                None => PretrainFile::default(),
            };
            let mc = file.model.resolve(a.arch, a.seed)?;
            let mut tc = file.train.resolve(a.arch, a.seed)?;
            if let Some(s) = a.steps {
                tc.steps = s;
            }
            let out = ctx.out_dir(&a.out)?;
            let log = |step: usize, loss: f64| eprintln!("step {step} loss {loss:.4}");
            let (ckpt, report) = match a.arch {
                Arch::Alm => train_alm(&a.corpus, &mc, &tc, log)?,
                Arch::Mlm => train_mlm(&a.corpus, &mc, &tc, log)?,
            };
            ckpt.save(&out)?;
            io::write_json(&out.join("train_report.json"), &report)?;
            outln!("saved {} ({} parameters, digest {})", out.display(), ckpt.model.num_params(), ckpt.digest());
        }
        Command::Probe(ProbeCmd::Train {
            encoder,
            data,
            rep,
            seeds,
            reference,
            lr,
            epochs,
            out,
        }) => {
            let enc = Checkpoint::load(&encoder)?;
            let train = read_probe_split(&data, "train")?;
            let valid = read_probe_split(&data, "valid")?;
            let test = read_probe_split(&data, "test")?;
            let bank = FeatureBank::from_encoder(&enc, rep, &[&train, &valid, &test])?;
            let out = ctx.out_dir(&out)?;
            let mut accs = Vec::new();
            for seed in 0..seeds {
                let mut pc = if reference {
                    ProbeConfig::reference(rep, seed)
                } else {
                    ProbeConfig::desk(rep, seed)
                };
                if let Some(v) = lr {
                    pc.lr = v;
                }
                if let Some(v) = epochs {
                    pc.epochs = v;
                }
                let (probe, report) = train_probe_on_bank(&bank, &train, &valid, &pc)?;
                let acc = emulab::probe::eval_probe_on_bank(&bank, &probe, &test)?.accuracy;
                outln!("seed {seed}: best epoch {} valid {:.4} test {acc:.4}", report.best_epoch, report.best_valid_accuracy);
                accs.push(acc);
                SavedProbe {
                    probe,
                    config: Some(pc),
                    report: Some(report),
                    encoder_digest: Some(enc.digest()),
                }
                .save(&out.join(format!("seed_{seed}")))?;
            }
            outln!("test accuracy {}", MeanStd::of(&accs));
        }
        Command::Probe(ProbeCmd::Eval {
            encoder,
            probe,
            data,
            breakdown,
        }) => {
            let enc = Checkpoint::load(&encoder)?;
            let file = pair_file(&data, "test");
            let lines = io::read_lines(&file)?;
            let is_logic = lines.first().is_some_and(|l| l.contains("\"denot_a\""));
            let mut accs = Vec::new();
            for dir in probe_dirs(&probe)? {
                let saved = SavedProbe::load(&dir)?;
                let r = if is_logic {
                    eval_probe(&enc, &saved.probe, &io::read_jsonl::<emulab::corpus::PairRecord>(&file)?)?
                } else {
                    eval_probe(&enc, &saved.probe, &read_pairs(&file)?)?
                };
                out!("{}: accuracy {:.4}", dir.display(), r.accuracy);
                if let Breakdown::Label = breakdown {
                    for (label, acc) in &r.per_label {
                        out!("  {label} {acc:.4}");
                    }
                }
                outln!();
                accs.push(r.accuracy);
            }
            if accs.len() > 1 {
                outln!("mean {}", MeanStd::of(&accs));
            }
        }
        Command::DirectEval(a) => {
            let enc = Checkpoint::load(&a.encoder)?;
            let records = io::read_jsonl(&pair_file(&a.data, &a.split))?;
            let (mut sentences, variant) = split_sentences(&records)?;
            if let Some(n) = a.n {
                sentences.truncate(n);
            }
            let r = direct_eval_checkpoint(&enc, &sentences, variant)?;
            for t in &r.per_template {
                outln!("{}\t{}\t{:.4}", t.name, t.pattern, t.accuracy);
            }
            outln!("mean {} over {} sentences ({} skipped)", r.summary(), r.sentences - r.skipped, r.skipped);
            if let Some(p) = a.report {
                io::write_json(&ctx.out_file(&p)?, &r)?;
            }
        }
        Command::Opacity(OpacityCmd::Build {
            facts,
            shape,
            n,
            seed,
            out,
        }) => {
            let fs = read_facts(&facts)?;
            let (inv, reg) = (VerbInventory::default(), TemplateRegistry::default());
            let g = Generator::new(&inv, &reg)?;
            let pairs = match shape {
                Shape::Simple => g.generate_simple_pairs(&fs)?,
                Shape::Coordinated => {
                    let n = n.ok_or_else(|| Failure::Validation("--n is required for coordinated pairs".into()))?;
                    g.generate_coordinated_pairs(&fs, &mut rng::stream(seed, 0), n)?
                }
            };
            let out = ctx.out_dir(&out)?;
            let m = write_splits(&split_dataset(&pairs, [8.0, 1.0, 1.0], seed), shape, seed, fs.len(), Some(io::file_digest(&facts)?), &out)?;
            io::write_jsonl(&out.join("all.jsonl"), &pairs)?;
            print_json(&m)?;
        }
        Command::Similarity(a) => {
            let table = EmbeddingTable::load(&a.encoder)?;
            let pairs = read_pairs(&a.pairs)?;
            let r = similarity_report(&table, &pairs, &VerbInventory::default(), a.iterations, a.seed)?;
            out!("{}", r.table());
            io::write_json(&ctx.out_file(&a.report)?, &r)?;
        }
        Command::Validate(a) => {
            let opts = ValidateOptions {
                variant: a.variant,
                symmetry: a.symmetry,
                reflexivity: a.reflexivity,
            };
            let r = validate_dataset(&a.path, opts)?;
            for v in &r.violations {
                match v.line {
                    Some(l) => outln!("{}:{l}: {}: {}", v.file, v.check, v.detail),
                    None => outln!("{}: {}: {}", v.file, v.check, v.detail),
                }
            }
            outln!("{} records, {} violations", r.records, r.violations.len());
            if !r.is_clean() {
                return Err(Failure::Validation(format!("{} violations", r.violations.len())));
            }
        }
        Command::Run(a) => {
            let cfg = load_config(&a.config)?;
            let opts = RunOptions {
                out_dir: a.out.as_deref().map(|p| ctx.out(p)).or_else(|| {
                    ctx.out_root
                        .as_ref()
                        .map(|root| root.join(cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.name))))
                }),
                force: ctx.force,
                command_line: std::env::args().collect(),
                config_file: Some(a.config.clone()),
                verbose: !a.quiet,
            };
            match run_experiment(&cfg, &opts) {
                Ok(m) => {
                    for s in &m.stages {
                        outln!("{}\t{:?}\t{:.1}s\t{}", s.name, s.status, s.seconds, s.metrics);
                    }
                    outln!("manifest: {}", Path::new(&m.out_dir).join(emulab::experiment::RUN_MANIFEST_FILE).display());
                }
                Err(e @ emulab::experiment::RunError::Validation(_)) => return Err(Failure::Validation(e.to_string())),
                Err(e) => return Err(Failure::Stage(e.to_string())),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) | Err(Failure::Closed) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
